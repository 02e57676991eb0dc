"""Weights, identification checks and tests for 2SLS with several treatments."""
from __future__ import annotations

__version__ = "0.1.0"

from ._kernels import BACKEND
from .design import (
    Dataset,
    InstrumentDesign,
    Population,
    ResponseType,
    TreatmentCoding,
    TypeComponent,
    enumerate_response_types,
    indicator_path,
)
from .errors import (
    DegenerateCellError,
    EnumerationTooLarge,
    MultiTSLSError,
    RankError,
    ShapeError,
    ValidationError,
)
from .estimator import EstimationResult, tsls_estimate, tsls_population_estimand
from .implications import (
    covary_similarly_test,
    kitagawa_test,
    linearity_test,
    subsample_first_stage_test,
)
from .oracle import (
    adversarial_effects,
    bias_decomposition,
    component_weights,
    covariate_weight_analysis,
    identification_report,
    just_identified_analysis,
    monotonicity_checks,
    ordered_allowed_types,
    response_weight_matrix,
)
from .projection import demean_within_cells, fit_projection, fwl_residualize
from .simulate import (
    Judge,
    ThresholdDesign,
    build_judge_design,
    build_threshold_crossing_population,
    sample_dataset,
)


def example_population() -> Population:
    """Two binary instruments, three treatments, with one cross-weight violator."""
    from importlib.resources import files
    import json

    text = files(__package__).joinpath("data/two_instruments.json").read_text(encoding="utf-8")
    return Population.from_dict(json.loads(text))
