"""Exact response-type weights and the identification checks built on them.

For a response type s, the weight matrix is Var(P)^-1 Cov(P, D_s(Z)), where
D_s(z) stacks the coded treatment indicators the type would take at z. Entry
(k, l) is the weight the k-th 2SLS coefficient places on that type's l-th
effect. Proper weights mean non-negative diagonals and zero off-diagonals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .design import Population, TypeComponent, as_type_tuple
from .errors import RankError, ShapeError, ValidationError
from .projection import PopulationProjection, population_projection, residualize

TOL = 1e-9


def _cov_with_types(proj: PopulationProjection, ind: np.ndarray, cell_idx) -> np.ndarray:
    """Cov(P, D_s | X) for each type; ind is (S, points, n)."""
    vals = proj.values[cell_idx]  # (S, points, n) after fancy indexing
    probs = proj.z_probs[cell_idx]
    return np.einsum("sj,sjk,sjl->skl", probs, vals, ind)


def _cell_indices(pop: Population, proj: PopulationProjection) -> np.ndarray:
    return np.array([proj.cell_index(c.cell) for c in pop.components], dtype=np.int64)


def component_weights(pop: Population, proj: PopulationProjection | None = None) -> np.ndarray:
    """Weight matrices of every component, shape (S, n, n)."""
    proj = population_projection(pop) if proj is None else proj
    cov = _cov_with_types(proj, pop.indicator_array().astype(np.float64), _cell_indices(pop, proj))
    return np.linalg.solve(proj.cross_moment()[None, :, :], cov)


@dataclass(frozen=True)
class WeightMatrix:
    assignment: tuple[int, ...]
    weights: np.ndarray
    cell: object = None

    def __getitem__(self, idx):
        return self.weights[idx]


def response_weight_matrix(pop: Population, rtype, method: str = "direct", cell=None) -> WeightMatrix:
    """Weights of one response type against the population's projection.

    ``rtype`` is a component index or any assignment tuple; the type need not
    belong to the population. ``method="fwl"`` computes each row from the
    residual of P_k on the other predicted treatments instead of inverting
    Var(P).
    """
    if isinstance(rtype, (int, np.integer)):
        comp = pop.components[int(rtype)]
        assignment, cell = comp.assignment, comp.cell
    else:
        assignment = as_type_tuple(rtype)
    if len(assignment) != pop.design.n_points:
        raise ShapeError(f"type {assignment} does not match {pop.design.n_points} support points")
    proj = population_projection(pop)
    ci = proj.cell_index(cell) if pop.has_cells else 0
    ind = pop.coding.indicators(np.asarray(assignment)).astype(np.float64)
    probs = proj.z_probs[ci]
    if method == "direct":
        cov = np.einsum("j,jk,jl->kl", probs, proj.values[ci], ind)
        w = np.linalg.solve(proj.cross_moment(), cov)
    elif method == "fwl":
        n = pop.n
        flat = proj.values.reshape(-1, n)
        mass = proj.mass.ravel()
        w = np.empty((n, n))
        for k in range(n):
            resid, _ = residualize(flat, mass, k)
            var_r = mass @ resid**2
            r_cell = resid.reshape(proj.values.shape[:2])[ci]
            cov = probs @ (r_cell[:, None] * ind) - (probs @ r_cell) * (probs @ ind)
            w[k] = cov / var_r
    else:
        raise ValidationError(f"unknown method {method!r}")
    return WeightMatrix(assignment, w, cell)


@dataclass(frozen=True)
class TypeVerdict:
    assignment: tuple[int, ...]
    prob: float
    cell: object
    weights: np.ndarray
    acm: np.ndarray  # (n,) own weight non-negative
    nce: np.ndarray  # (n, n) cross weight zero; diagonal set True

    @property
    def proper(self) -> bool:
        return bool(self.acm.all() and self.nce.all())


@dataclass(frozen=True)
class IdentificationReport:
    """Per-type verdicts on own-weight signs and cross-weight zeros.

    ``rho`` holds, for each k, the coefficients of P_k regressed on the other
    predicted treatments. The cross-weight check is repeated through these
    coefficients (``rho_nce``) and must agree with the direct weights.
    """

    verdicts: tuple[TypeVerdict, ...]
    tol: float
    rho: np.ndarray
    rho_nce: np.ndarray
    routes_agree: bool
    worst_acm: tuple | None
    worst_nce: tuple | None

    @property
    def acm_holds(self) -> bool:
        return all(v.acm.all() for v in self.verdicts)

    @property
    def nce_holds(self) -> bool:
        return all(v.nce.all() for v in self.verdicts)

    @property
    def proper(self) -> bool:
        return self.acm_holds and self.nce_holds

    def to_dict(self) -> dict:
        return {
            "proper": self.proper,
            "acm_holds": self.acm_holds,
            "nce_holds": self.nce_holds,
            "tol": self.tol,
            "routes_agree": self.routes_agree,
            "rho": self.rho.tolist(),
            "worst_acm": _describe_worst(self.worst_acm),
            "worst_nce": _describe_worst(self.worst_nce),
            "types": [
                {
                    "assignment": list(v.assignment),
                    "prob": v.prob,
                    **({"cell": v.cell} if v.cell is not None else {}),
                    "weights": v.weights.tolist(),
                    "acm": v.acm.tolist(),
                    "nce": v.nce.tolist(),
                    "proper": v.proper,
                }
                for v in self.verdicts
            ],
        }


def _describe_worst(item):
    if item is None:
        return None
    idx, k, l, value = item
    return {"component": idx, "row": k, "column": l, "weight": value}


def identification_report(pop: Population, tol: float = TOL) -> IdentificationReport:
    """Check every component for non-negative own weights and zero cross weights."""
    proj = population_projection(pop)
    ind = pop.indicator_array().astype(np.float64)
    cidx = _cell_indices(pop, proj)
    cov = _cov_with_types(proj, ind, cidx)  # (S, n, n)
    weights = np.linalg.solve(proj.cross_moment()[None, :, :], cov)
    var_p = proj.variance()
    n = pop.n
    off = ~np.eye(n, dtype=bool)

    diag = np.einsum("skk->sk", weights)
    acm = diag >= -tol
    nce = (np.abs(weights) <= tol) | ~off[None]

    # Second route: P_k minus its regression on the other P's is orthogonal
    # to D_l exactly when Cov(P_k, D_l) = rho_k' Cov(P_-k, D_l).
    rho = np.zeros((n, max(n - 1, 0)))
    rho_nce = np.ones_like(nce)
    for k in range(n):
        others = [j for j in range(n) if j != k]
        sub = var_p[np.ix_(others, others)]
        rho[k] = np.linalg.solve(sub, var_p[others, k])
        resid_var = var_p[k, k] - var_p[others, k] @ rho[k]
        margin = cov[:, k, :] - np.einsum("j,sjl->sl", rho[k], cov[:, others, :])
        scaled = margin / resid_var
        for l in others:
            rho_nce[:, k, l] = np.abs(scaled[:, l]) <= tol
    routes_agree = bool(np.array_equal(rho_nce, nce))

    verdicts = tuple(
        TypeVerdict(c.assignment, c.prob, c.cell, weights[s], acm[s], nce[s]) for s, c in enumerate(pop.components)
    )
    worst_acm = None
    if not acm.all():
        s, k = np.unravel_index(np.argmin(diag), diag.shape)
        worst_acm = (int(s), int(k), int(k), float(diag[s, k]))
    worst_nce = None
    if not nce.all():
        mags = np.where(off[None], np.abs(weights), 0.0)
        s, k, l = np.unravel_index(np.argmax(mags), mags.shape)
        worst_nce = (int(s), int(k), int(l), float(weights[s, k, l]))
    return IdentificationReport(verdicts, tol, rho, rho_nce, routes_agree, worst_acm, worst_nce)


def adversarial_effects(pop: Population, report: IdentificationReport | None = None) -> Population:
    """Effects that make the 2SLS estimand break weak causality.

    Only the worst offending component gets a non-zero effect. A negative own
    weight turns non-negative effects into a negative estimand; a non-zero
    cross weight makes a coefficient non-zero while every effect it should
    measure is zero.
    """
    report = identification_report(pop) if report is None else report
    target = report.worst_acm or report.worst_nce
    if target is None:
        raise ValidationError("weights are proper; no adversarial effects exist")
    idx, _, l, value = target
    betas = np.zeros((len(pop.components), pop.n))
    betas[idx, l] = 1.0 if l == target[1] else np.sign(value)
    return pop.with_effects(betas)


# --- just-identified designs ---------------------------------------------


@dataclass(frozen=True)
class JustIdentifiedResult:
    """Outcome of the label-matching characterisation.

    ``labeling[v]`` is the treatment that instrument value v is matched to.
    ``weight_route`` is the proper-weights verdict from the oracle, or None
    when the rank condition fails.
    """

    passes: bool
    labeling: tuple[int, ...] | None
    unique: bool
    classes: tuple[str, ...]
    weight_route: bool | None

    @property
    def routes_agree(self) -> bool | None:
        return None if self.weight_route is None else self.weight_route == self.passes


def _require_just_identified(pop: Population):
    if pop.design.n_points != pop.coding.n_treatments or pop.design.m != pop.n:
        raise ShapeError(
            "needs as many instrument values as treatments and one instrument per indicator "
            f"(got {pop.design.n_points} values, {pop.design.m} instruments, {pop.coding.n_treatments} treatments)"
        )


def _forced_labels(ind_types: np.ndarray):
    """Per indicator k, the set of instrument values it must be matched to."""
    forced: dict[int, set] = {}
    ok = True
    for ind in ind_types:  # (points, n)
        for k in range(ind.shape[1]):
            col = ind[:, k]
            if col.min() == col.max():
                continue
            ones = np.flatnonzero(col)
            if ones.size != 1:
                ok = False
                continue
            forced.setdefault(k, set()).add(int(ones[0]))
    return forced, ok


def _classify(ind: np.ndarray, assignment, labeling) -> str:
    if min(assignment) == max(assignment):
        return "never-taker" if assignment[0] == 0 else f"always-{assignment[0]}-taker"
    parts, bad = [], []
    for k in range(ind.shape[1]):
        col = ind[:, k]
        if col.min() == col.max():
            continue
        expected = np.array([1 if labeling is not None and labeling[v] == k + 1 else 0 for v in range(col.size)])
        (parts if np.array_equal(col, expected) else bad).append(str(k + 1))
    if bad:
        return "violator of " + "+".join(bad)
    return "+".join(parts) + "-complier"


def just_identified_analysis(pop: Population, labeling=None) -> JustIdentifiedResult:
    """Match instrument values to treatments so every type is a complier.

    Each coded indicator of each type must be constant or equal to the
    indicator of the single instrument value matched to it. Non-constant
    indicators force the matching, so it is found directly rather than by
    enumerating permutations. Pass ``labeling`` to test one fixed matching.
    """
    _require_just_identified(pop)
    n_t = pop.coding.n_treatments
    ind = pop.indicator_array()
    if labeling is not None:
        labeling = tuple(int(v) for v in labeling)
        if sorted(labeling) != list(range(n_t)):
            raise ValidationError(f"labeling {labeling} is not a permutation of 0..{n_t - 1}")
        passes = all(
            not _classify(ind[s], c.assignment, labeling).startswith("violator") for s, c in enumerate(pop.components)
        )
        found, unique = (labeling if passes else None), False
    else:
        forced, ok = _forced_labels(ind)
        clash = any(len(v) > 1 for v in forced.values())
        targets = [next(iter(v)) for v in forced.values() if len(v) == 1]
        passes = ok and not clash and len(set(targets)) == len(targets)
        found, unique = None, False
        if passes:
            assign = {next(iter(v)): k + 1 for k, v in forced.items()}
            free_values = [v for v in range(n_t) if v not in assign]
            free_labels = [t for t in range(n_t) if t not in assign.values()]
            for v, t in zip(free_values, free_labels):
                assign[v] = t
            found = tuple(assign[v] for v in range(n_t))
            unique = len(forced) == n_t - 1
    classes = tuple(_classify(ind[s], c.assignment, found) for s, c in enumerate(pop.components))
    try:
        weight_route = identification_report(pop).proper
    except RankError:
        weight_route = None
    return JustIdentifiedResult(passes, found, unique, classes, weight_route)


def ordered_allowed_types(pop: Population) -> list[tuple[tuple[int, ...], bool]]:
    """Flag types that are constant or pick k at value k and k-1 elsewhere."""
    out = []
    for c in pop.components:
        a = c.assignment
        ok = min(a) == max(a)
        for k in range(1, len(a)):
            ok = ok or all(a[v] == (k if v == k else k - 1) for v in range(len(a)))
        out.append((a, bool(ok)))
    return out


@dataclass(frozen=True)
class MonotonicityResult:
    joint: bool
    unordered: bool
    kirkeboen: dict | None  # condition name -> per-component verdicts
    joint_pairs: np.ndarray = field(repr=False)

    @property
    def kirkeboen_holds(self) -> bool | None:
        if self.kirkeboen is None:
            return None
        return all(all(v) for v in self.kirkeboen.values())


def kirkeboen_conditions(assignment) -> dict[str, bool]:
    """Unordered-coding conditions for a just-identified type, value v matched to treatment v."""
    a = tuple(assignment)
    n_t = len(a)
    mono = all(a[k] == k or a[0] != k for k in range(1, n_t))
    irrelevance = all(a[k] == a[0] for k in range(1, n_t) if (a[k] == k) == (a[0] == k))
    next_best = a[0] == 0 or min(a) == max(a)
    return {"monotonicity": mono, "irrelevance": irrelevance, "next_best": next_best}


def monotonicity_checks(pop: Population) -> MonotonicityResult:
    """Joint and unordered monotonicity, plus the per-type just-identified conditions."""
    ind = pop.indicator_array()
    pairs = _kernels.monotone_pairs(ind)
    unordered_ind = np.eye(pop.coding.n_treatments, dtype=np.int8)[pop.assignments]
    unordered = bool(_kernels.monotone_pairs(unordered_ind).all())
    kirk = None
    if pop.design.n_points == pop.coding.n_treatments:
        per = [kirkeboen_conditions(c.assignment) for c in pop.components]
        kirk = {name: [p[name] for p in per] for name in ("monotonicity", "irrelevance", "next_best")}
    return MonotonicityResult(bool(pairs.all()), unordered, kirk, pairs)


# --- bias decomposition ---------------------------------------------------


@dataclass(frozen=True)
class BiasDecomposition:
    """Split of one 2SLS coefficient into complier, defier and cross terms.

    ``w_negative`` is the total magnitude of negative own weights and
    ``w_cross`` the total positive cross weight (equal to the negative total).
    Averages over empty groups are None and contribute nothing.
    """

    row: int
    estimand: float
    beta_compliers: float
    beta_defiers: float | None
    beta_pushed_in: float | None
    beta_pushed_out: float | None
    w_negative: float
    w_cross: float

    def reconstruct(self) -> float:
        out = self.beta_compliers
        if self.beta_defiers is not None:
            out -= (self.beta_defiers - self.beta_compliers) * self.w_negative
        if self.beta_pushed_in is not None and self.beta_pushed_out is not None:
            out -= (self.beta_pushed_out - self.beta_pushed_in) * self.w_cross
        return out

    @property
    def defier_ratio_bound(self) -> float:
        """Defier-to-complier effect ratio beyond which the sign can flip."""
        return np.inf if self.w_negative == 0 else (1 + self.w_negative) / self.w_negative

    @property
    def cross_ratio_bound(self) -> float:
        return np.inf if self.w_cross == 0 else 1 / self.w_cross

    def to_dict(self) -> dict:
        return {
            "row": self.row,
            "estimand": self.estimand,
            "beta_compliers": self.beta_compliers,
            "beta_defiers": self.beta_defiers,
            "beta_pushed_in": self.beta_pushed_in,
            "beta_pushed_out": self.beta_pushed_out,
            "w_negative": self.w_negative,
            "w_cross": self.w_cross,
            "defier_ratio_bound": _finite_or_none(self.defier_ratio_bound),
            "cross_ratio_bound": _finite_or_none(self.cross_ratio_bound),
            "reconstruction": self.reconstruct(),
        }


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


def bias_decomposition(
    pop: Population, k: int, weights: np.ndarray | None = None, zero_tol: float = 1e-12
) -> BiasDecomposition:
    """Decompose coefficient ``k`` (zero-based) of the population estimand.

    Weights within ``zero_tol`` of zero count as zero when grouping types.
    """
    n = pop.n
    if not 0 <= k < n:
        raise ValidationError(f"row {k} out of range for {n} indicators")
    w = component_weights(pop) if weights is None else weights
    p = pop.probs
    b = pop.betas
    own = w[:, k, k]
    pos, neg = own > zero_tol, own < -zero_tol
    if not pos.any():
        raise ValidationError("no type has a positive own weight")
    w_pos = p[pos] @ own[pos]
    w_neg = abs(float(p[neg] @ own[neg]))
    beta_c = (p[pos] * own[pos]) @ b[pos, k] / w_pos
    beta_d = (p[neg] * own[neg]) @ b[neg, k] / -w_neg if neg.any() else None

    others = [l for l in range(n) if l != k]
    cross = w[:, k, others]  # (S, n-1)
    eff = b[:, others]
    mass = p[:, None] * cross
    up, down = cross > zero_tol, cross < -zero_tol
    c_pos = mass[up].sum()
    c_neg = -mass[down].sum()
    beta_in = (mass[up] @ eff[up]) / c_pos if up.any() else None
    beta_out = (mass[down] @ eff[down]) / -c_neg if down.any() else None
    estimand = float(np.einsum("s,sl,sl->", p, w[:, k, :], b))
    # Averaged over types the cross weights net to zero, so the positive and
    # negative totals coincide; the positive total is reported.
    return BiasDecomposition(
        k,
        estimand,
        float(beta_c),
        None if beta_d is None else float(beta_d),
        None if beta_in is None else float(beta_in),
        None if beta_out is None else float(beta_out),
        float(w_neg),
        float(c_pos),
    )


# --- covariates -------------------------------------------------------------


@dataclass(frozen=True)
class CovariateAnalysis:
    """Weights and variance comparisons for designs with covariate cells.

    ``scale[c]`` is the least-squares factor a with Var(P | X=c) ~ a Var(P),
    ``misfit[c]`` the relative Frobenius error of that fit. ``ratio_matrices``
    hold Var(P)^-1 Var(P | X=c); ``contamination[c][k, l]`` divides entry
    (k, l) by entry (l, l), i.e. the weight coefficient k puts on the l-th
    effect of types in cell c relative to the weight coefficient l puts on
    it. Both are None when Var(P) is singular.
    """

    cells: list
    var_pooled: np.ndarray
    var_cells: dict
    scale: dict
    misfit: dict
    covary_similarly: bool
    ratio_matrices: dict | None
    contamination: dict | None
    weights: np.ndarray | None  # (S, n, n) per component, within its cell

    def to_dict(self) -> dict:
        def conv(d):
            return None if d is None else {str(k): np.asarray(v).tolist() for k, v in d.items()}

        return {
            "covary_similarly": self.covary_similarly,
            "var_pooled": self.var_pooled.tolist(),
            "var_cells": conv(self.var_cells),
            "scale": {str(k): v for k, v in self.scale.items()},
            "misfit": {str(k): v for k, v in self.misfit.items()},
            "ratio_matrices": conv(self.ratio_matrices),
            "contamination": conv(self.contamination),
            "weights": None if self.weights is None else self.weights.tolist(),
        }


def covariate_weight_analysis(pop: Population, tol: float = 1e-12) -> CovariateAnalysis:
    """Per-cell weights and the check that Var(P | X) is proportional to Var(P).

    The proportionality check needs no inverse, so it also runs when the
    pooled Var(P) is singular.
    """
    proj = population_projection(pop, check_rank=False)
    var_pooled = proj.variance()
    norm = np.linalg.norm(var_pooled)
    var_cells, scale, misfit = {}, {}, {}
    for ci, cell in enumerate(proj.cells):
        vc = proj.cell_variance(ci)
        a = float(np.sum(vc * var_pooled) / norm**2) if norm > 0 else 0.0
        var_cells[cell] = vc
        scale[cell] = a
        misfit[cell] = float(np.linalg.norm(vc - a * var_pooled) / norm) if norm > 0 else np.inf
    similar = all(m <= tol for m in misfit.values()) and all(a > 0 for a in scale.values())

    ratios = contamination = weights = None
    cond = np.linalg.cond(var_pooled)
    if np.isfinite(cond) and cond <= 1e12:
        ratios = {c: np.linalg.solve(var_pooled, v) for c, v in var_cells.items()}
        contamination = {c: r / np.diag(r)[None, :] for c, r in ratios.items()}
        weights = component_weights(pop, proj)
    return CovariateAnalysis(
        proj.cells, var_pooled, var_cells, scale, misfit, similar, ratios, contamination, weights
    )


def weighted_effect_sum(pop: Population, weights: np.ndarray | None = None) -> np.ndarray:
    """Sum over components of Pr[s] w_s beta_s, which equals the 2SLS estimand."""
    w = component_weights(pop) if weights is None else weights
    return np.einsum("s,skl,sl->k", pop.probs, w, pop.betas)


__all__ = [
    "TOL",
    "WeightMatrix",
    "TypeVerdict",
    "IdentificationReport",
    "JustIdentifiedResult",
    "MonotonicityResult",
    "BiasDecomposition",
    "CovariateAnalysis",
    "TypeComponent",
    "adversarial_effects",
    "bias_decomposition",
    "component_weights",
    "covariate_weight_analysis",
    "identification_report",
    "just_identified_analysis",
    "kirkeboen_conditions",
    "monotonicity_checks",
    "ordered_allowed_types",
    "response_weight_matrix",
    "weighted_effect_sum",
]
