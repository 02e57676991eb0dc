"""Two-stage least squares with several endogenous treatment indicators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .design import Dataset, Population, TreatmentCoding
from .projection import population_projection, sample_projection


def tsls_population_estimand(pop: Population) -> np.ndarray:
    """Var(P)^-1 Cov(P, Y) computed from exact population moments.

    With covariate cells, P is demeaned within cells (fixed-effects 2SLS).
    """
    proj = population_projection(pop)
    ind = pop.indicator_array().astype(np.float64)
    # E[Y | X, Z] on the grid; the y0 intercepts drop out after demeaning
    # but are kept so the object matches the outcome model literally.
    y_grid = np.zeros(proj.values.shape[:2])
    probs = pop.probs
    for comp_idx, comp in enumerate(pop.components):
        ci = proj.cell_index(comp.cell)
        q = proj.cell_probs[ci]
        y_grid[ci] += probs[comp_idx] / q * (comp.y0 + ind[comp_idx] @ comp.beta)
    cov_py = np.einsum("cj,cjk,cj->k", proj.mass, proj.values, y_grid)
    return np.linalg.solve(proj.cross_moment(), cov_py)


@dataclass(frozen=True)
class EstimationResult:
    beta: np.ndarray
    vcov: np.ndarray
    n_obs: int
    first_stage: np.ndarray
    dropped_cells: list = field(default_factory=list)
    fe_cell: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "vcov": self.vcov.tolist(),
            "n_obs": self.n_obs,
            "fe_cell": self.fe_cell,
            "dropped_cells": [str(c) for c in self.dropped_cells],
        }


def tsls_estimate(
    data: Dataset,
    coding: TreatmentCoding,
    fe_cell: bool = False,
    weights: np.ndarray | None = None,
) -> EstimationResult:
    """Sample 2SLS with heteroskedasticity-robust (HC0) standard errors.

    ``weights`` are frequency weights and override any stored on ``data``.
    """
    if weights is not None:
        data = Dataset(data.y, data.t, data.z, data.x_cell, data.flags, weights)
    fs = sample_projection(data, coding, fe_cell)
    w = fs.weights
    y = data.y[fs.keep]
    n = coding.n
    if fe_cell:
        y = _kernels.group_demean(y[:, None], fs.codes, w)[:, 0]
        x_hat, x_obs = fs.fitted, fs.d
    else:
        ones = np.ones((y.size, 1))
        x_hat = np.hstack([ones, fs.fitted])
        x_obs = np.hstack([ones, fs.d])
    sw = np.sqrt(w)[:, None]
    q, r = np.linalg.qr(x_hat * sw)
    coef = np.linalg.solve(r, q.T @ (y * sw[:, 0]))
    resid = y - x_obs @ coef
    r_inv = np.linalg.inv(r)
    bread = r_inv @ r_inv.T
    meat = _kernels.score_outer(x_hat, resid[:, None], w)
    vcov = bread @ meat @ bread
    if not fe_cell:
        coef, vcov = coef[1:], vcov[1:, 1:]
    return EstimationResult(coef[-n:], vcov, int(y.size), fs.coef, fs.dropped_cells, fe_cell)
