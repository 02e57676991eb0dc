import numpy as np
import pytest

from multitsls import (
    Dataset,
    TreatmentCoding,
    sample_dataset,
    tsls_estimate,
    tsls_population_estimand,
)
from multitsls.errors import RankError, ValidationError

from helpers import brute_force_tsls, expand_rows, random_population, two_instrument_population


def _population_rows(pop):
    s_idx, z_idx, w = expand_rows(pop)
    t = pop.assignments[s_idx, z_idx]
    d = pop.coding.indicators(t)
    y = pop.y0s[s_idx] + np.einsum("ik,ik->i", d, pop.betas[s_idx])
    return Dataset(y, t, pop.design.support[z_idx], weights=w)


@pytest.mark.parametrize("seed", range(10))
def test_population_estimand_matches_explicit_two_stages(seed):
    pop = random_population(np.random.default_rng(seed))
    np.testing.assert_allclose(tsls_population_estimand(pop), brute_force_tsls(pop), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_weighted_sample_reproduces_estimand(seed):
    pop = random_population(np.random.default_rng(100 + seed))
    res = tsls_estimate(_population_rows(pop), pop.coding)
    np.testing.assert_allclose(res.beta, tsls_population_estimand(pop), atol=1e-10)


def test_homogeneous_effects_recovered():
    pop = two_instrument_population(betas=np.tile([1.5, -0.5], (8, 1)))
    np.testing.assert_allclose(tsls_population_estimand(pop), [1.5, -0.5], atol=1e-12)


def test_matches_manual_two_stage_with_cell_dummies():
    rng = np.random.default_rng(4)
    n = 3000
    cells = rng.integers(0, 4, n)
    z = rng.normal(size=(n, 3))
    lat = z @ np.array([[1.0, 0.2], [0.1, 1.0], [0.3, -0.4]]) + rng.normal(size=(n, 2)) + cells[:, None] * 0.3
    t = np.where(lat[:, 0] > 0.5, 1, 0) + np.where(lat[:, 1] > 0.8, 2, 0)
    t = np.minimum(t, 2)
    coding = TreatmentCoding.unordered(3)
    d = coding.indicators(t).astype(float)
    y = d @ np.array([1.0, -2.0]) + cells + rng.normal(size=n)
    data = Dataset(y, t, z, x_cell=cells)
    res = tsls_estimate(data, coding, fe_cell=True)

    dummies = (cells[:, None] == np.arange(4)).astype(float)
    first = np.column_stack([z, dummies])
    p_hat = first @ np.linalg.lstsq(first, d, rcond=None)[0]
    second = np.column_stack([p_hat, dummies])
    manual = np.linalg.lstsq(second, y, rcond=None)[0][:2]
    np.testing.assert_allclose(res.beta, manual, atol=1e-10)


def test_hc0_matches_textbook_sandwich():
    rng = np.random.default_rng(8)
    n = 500
    z = rng.normal(size=(n, 2))
    t = (z[:, 0] + rng.normal(size=n) > 0).astype(int) + (z[:, 1] + rng.normal(size=n) > 1).astype(int)
    t = np.minimum(t, 2)
    coding = TreatmentCoding.ordered(3)
    d = coding.indicators(t).astype(float)
    y = d @ [0.5, 1.0] + rng.normal(size=n) * (1 + np.abs(z[:, 0]))
    res = tsls_estimate(Dataset(y, t, z), coding)

    Z = np.column_stack([np.ones(n), z])
    X = np.column_stack([np.ones(n), d])
    Xh = Z @ np.linalg.solve(Z.T @ Z, Z.T @ X)
    beta = np.linalg.solve(Xh.T @ X, Xh.T @ y)
    u = y - X @ beta
    bread = np.linalg.inv(Xh.T @ Xh)
    vcov = bread @ (Xh.T * u**2) @ Xh @ bread
    np.testing.assert_allclose(res.beta, beta[1:], atol=1e-10)
    np.testing.assert_allclose(res.vcov, vcov[1:, 1:], rtol=1e-8)


def test_degenerate_cells_dropped_and_reported():
    pop = two_instrument_population(betas=np.tile([1.0, 2.0], (8, 1)))
    data = sample_dataset(pop, 2000, seed=1)
    cells = np.arange(data.n_obs) % 5
    cells[-1] = 99
    data = Dataset(data.y, data.t, data.z, x_cell=cells)
    res = tsls_estimate(data, pop.coding, fe_cell=True)
    assert res.dropped_cells == [99]
    assert res.n_obs == data.n_obs - 1


def test_rank_failure_in_sample():
    n = 100
    z = np.column_stack([np.arange(n) % 2, np.arange(n) % 2]).astype(float)
    with pytest.raises(RankError):
        tsls_estimate(Dataset(np.zeros(n), np.arange(n) % 3, z), TreatmentCoding.unordered(3))


def test_too_few_rows():
    with pytest.raises(ValidationError):
        tsls_estimate(Dataset([0.0, 1.0, 2.0], [0, 1, 2], [[0.0], [1.0], [2.0]]), TreatmentCoding.unordered(3))
