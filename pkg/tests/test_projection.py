import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multitsls import (
    Dataset,
    InstrumentDesign,
    Population,
    TreatmentCoding,
    demean_within_cells,
    fit_projection,
    fwl_residualize,
    sample_dataset,
)
from multitsls.errors import DegenerateCellError, RankError
from multitsls.projection import population_projection, residualize

from helpers import TWO_INSTRUMENTS, random_population, two_instrument_population


def test_two_instrument_first_stage():
    coef = fit_projection(two_instrument_population())
    np.testing.assert_allclose(coef.intercepts, [0.1, 0.2], atol=1e-14)
    np.testing.assert_allclose(coef.slopes, [[0.4, 0.0], [0.0, 0.5]], atol=1e-14)


def test_projection_reproduces_conditional_means_when_saturated():
    pop = two_instrument_population()
    proj = population_projection(pop)
    np.testing.assert_allclose(proj.levels[0], proj.d_bar[0], atol=1e-14)


def test_fwl_residual_matches_hand_value():
    # residual of P1 on P2: (0.9 + 2 Z1 + Z2) / 5 minus its mean
    pop = two_instrument_population()
    resid = fwl_residualize(fit_projection(pop), TWO_INSTRUMENTS, 0)
    z = TWO_INSTRUMENTS.support
    hand = (0.9 + 2 * z[:, 0] + z[:, 1]) / 5
    hand -= TWO_INSTRUMENTS.probs @ hand
    np.testing.assert_allclose(resid, hand, atol=1e-14)
    assert TWO_INSTRUMENTS.probs @ resid**2 == pytest.approx(2 / 75, abs=1e-15)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_residual_orthogonal_to_others(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(8, 3))
    w = rng.dirichlet(np.ones(8))
    for k in range(3):
        r, _ = residualize(vals, w, k)
        others = np.delete(vals, k, axis=1)
        assert abs(w @ r) < 1e-12
        np.testing.assert_allclose(others.T @ (w * r), 0, atol=1e-12)


def test_singular_instruments_raise_rank_error():
    design = InstrumentDesign([[0, 0], [1, 1], [2, 2]], [1 / 3, 1 / 3, 1 / 3])
    pop = Population.from_types(design, TreatmentCoding.unordered(3), [((0, 1, 2), 1.0)])
    with pytest.raises(RankError) as exc:
        fit_projection(pop)
    assert "rank condition" in str(exc.value)


def test_first_stage_rank_failure():
    # D2 never varies with the instrument
    pop = Population.from_types(TWO_INSTRUMENTS, TreatmentCoding.unordered(3), [((0, 1, 1), 0.5), ((0, 0, 1), 0.5)])
    with pytest.raises(RankError):
        fit_projection(pop)


def test_sample_projection_on_population_rows_is_exact():
    pop = random_population(np.random.default_rng(3))
    from helpers import expand_rows

    s_idx, z_idx, w = expand_rows(pop)
    data = Dataset(np.zeros(len(w)), pop.assignments[s_idx, z_idx], pop.design.support[z_idx], weights=w)
    sample = fit_projection(data, pop.coding)
    exact = fit_projection(pop)
    np.testing.assert_allclose(sample.slopes, exact.slopes, atol=1e-10)
    np.testing.assert_allclose(sample.intercepts, exact.intercepts, atol=1e-10)


def test_sample_projection_close_to_population():
    pop = two_instrument_population()
    data = sample_dataset(pop, 40_000, seed=11)
    coef = fit_projection(data, pop.coding)
    np.testing.assert_allclose(coef.slopes, [[0.4, 0.0], [0.0, 0.5]], atol=0.03)


class TestDemean:
    def test_means_are_zero(self):
        rng = np.random.default_rng(0)
        n = 200
        data = Dataset(rng.normal(size=n), rng.integers(0, 3, n), rng.normal(size=(n, 2)), x_cell=rng.integers(0, 5, n))
        out = demean_within_cells(data, TreatmentCoding.unordered(3))
        for c in range(5):
            sel = out.codes == c
            np.testing.assert_allclose(out.y[sel].mean(), 0, atol=1e-12)
            np.testing.assert_allclose(out.d[sel].mean(axis=0), 0, atol=1e-12)
            np.testing.assert_allclose(out.z[sel].mean(axis=0), 0, atol=1e-12)

    def test_singleton_cell(self):
        data = Dataset(np.zeros(4), [0, 1, 2, 0], np.arange(4.0), x_cell=["a", "a", "a", "b"])
        with pytest.raises(DegenerateCellError) as exc:
            demean_within_cells(data, TreatmentCoding.unordered(3))
        assert exc.value.cells == ["b"]
