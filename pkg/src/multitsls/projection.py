"""Linear projection of treatment indicators on instruments.

The population machinery works on a grid of (covariate cell, support point)
cells. A population without covariates is the one-cell special case, where
within-cell demeaning is plain centering.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .design import Dataset, InstrumentDesign, Population, TreatmentCoding, cell_codes
from .errors import DegenerateCellError, RankError, ShapeError, ValidationError

COND_THRESHOLD = 1e12
RANK = "rank condition"


def _check_condition(mat, what, threshold=COND_THRESHOLD):
    mat = np.atleast_2d(mat)
    if not np.all(np.isfinite(mat)):
        raise RankError(f"{what} has non-finite entries", RANK)
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > threshold:
        raise RankError(f"{what} is singular (condition number {cond:.3g} > {threshold:.0e})", RANK)
    return cond


@dataclass(frozen=True)
class ProjectionCoefficients:
    """P = intercepts + slopes @ z, with ``slopes`` shaped (n, m).

    When ``demeaned`` is set the map applies to instruments demeaned within
    covariate cells and the intercepts are zero.
    """

    intercepts: np.ndarray
    slopes: np.ndarray
    demeaned: bool = False

    def predict(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.slopes.shape[1]:
            raise ShapeError(f"expected {self.slopes.shape[1]} instrument columns, got {z.shape[1]}")
        return z @ self.slopes.T + self.intercepts


@dataclass(frozen=True)
class PopulationProjection:
    """Exact projection of a population, evaluated on every grid cell."""

    cells: list
    cell_probs: np.ndarray  # (C,)
    z_probs: np.ndarray  # (C, points), conditional on the cell
    values: np.ndarray  # (C, points, n), demeaned within cell
    levels: np.ndarray  # (C, points, n), E[D | X] + demeaned projection
    d_bar: np.ndarray  # (C, points, n), E[D | X, Z]
    coefficients: ProjectionCoefficients

    @property
    def mass(self) -> np.ndarray:
        """Joint probability of each (cell, point)."""
        return self.cell_probs[:, None] * self.z_probs

    def variance(self) -> np.ndarray:
        vals = self.values.reshape(-1, self.values.shape[-1])
        return vals.T @ (self.mass.ravel()[:, None] * vals)

    def cross_moment(self) -> np.ndarray:
        """E[P D'] with P demeaned, equal to Var(P) but better conditioned as
        the denominator of the weights: it makes them average to I exactly
        up to one linear solve."""
        return np.einsum("cj,cjk,cjl->kl", self.mass, self.values, self.d_bar)

    def cell_variance(self, idx: int) -> np.ndarray:
        vals = self.values[idx]
        return vals.T @ (self.z_probs[idx][:, None] * vals)

    def cell_index(self, cell) -> int:
        return self.cells.index(cell)


def population_projection(
    pop: Population, cond_threshold: float = COND_THRESHOLD, check_rank: bool = True
) -> PopulationProjection:
    """Project E[D | X, Z] on instruments demeaned within covariate cells.

    ``check_rank=False`` skips the invertibility check on Var(P) so that
    variance comparisons remain available for rank-deficient designs.
    """
    support = pop.design.support
    ind = pop.indicator_array().astype(np.float64)  # (S, points, n)
    probs = pop.probs
    cells = pop.cells
    cell_of = [c.cell for c in pop.components]
    n_c, n_pts, n = len(cells), pop.design.n_points, pop.n

    cell_probs = np.zeros(n_c)
    z_probs = np.zeros((n_c, n_pts))
    d_bar = np.zeros((n_c, n_pts, n))
    for ci, cell in enumerate(cells):
        members = np.array([c == cell for c in cell_of])
        q = probs[members].sum()
        cell_probs[ci] = q
        z_probs[ci] = pop.z_probs(cell)
        if q > 0:
            d_bar[ci] = np.tensordot(probs[members] / q, ind[members], axes=1)

    z_mean = z_probs @ support  # (C, m)
    z_dd = support[None, :, :] - z_mean[:, None, :]
    d_mean = np.einsum("cj,cjk->ck", z_probs, d_bar)
    d_dd = d_bar - d_mean[:, None, :]
    mass = cell_probs[:, None] * z_probs

    flat_z = z_dd.reshape(-1, support.shape[1])
    flat_d = d_dd.reshape(-1, n)
    w = mass.ravel()[:, None]
    var_z = flat_z.T @ (w * flat_z)
    cov_zd = flat_z.T @ (w * flat_d)
    if n_c == 1 and check_rank:
        _check_condition(var_z, "Var(Z)", cond_threshold)
        coef = np.linalg.solve(var_z, cov_zd)
    else:
        # Cell-specific instrument supports make Var of the demeaned
        # instruments singular; the projection itself is still unique.
        coef = np.linalg.pinv(var_z, rcond=1e-13, hermitian=True) @ cov_zd
    values = np.einsum("cjm,mk->cjk", z_dd, coef)
    flat_p = values.reshape(-1, n)
    var_p = flat_p.T @ (w * flat_p)
    if check_rank:
        _check_condition(var_p, "Var(P), i.e. Cov(Z, D) lacks full column rank,", cond_threshold)

    levels = values + d_mean[:, None, :]
    if n_c == 1:
        slopes = coef.T
        coefs = ProjectionCoefficients(d_mean[0] - slopes @ z_mean[0], slopes, False)
    else:
        coefs = ProjectionCoefficients(np.zeros(n), coef.T, True)
    return PopulationProjection(cells, cell_probs, z_probs, values, levels, d_bar, coefs)


@dataclass(frozen=True)
class SampleProjection:
    """First-stage fit on a dataset."""

    fitted: np.ndarray  # (rows, n): levels, or within-cell demeaned with fe
    d: np.ndarray  # (rows, n), demeaned with fe
    z: np.ndarray  # regressors used, demeaned with fe
    coef: np.ndarray
    keep: np.ndarray  # rows retained after dropping degenerate cells
    dropped_cells: list
    codes: np.ndarray | None
    weights: np.ndarray
    coefficients: ProjectionCoefficients


def _weighted_lstsq(X, Y, w):
    sw = np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(X * sw, Y * sw, rcond=None)
    return coef


def sample_projection(
    data: Dataset,
    coding: TreatmentCoding,
    fe_cell: bool = False,
    cond_threshold: float = COND_THRESHOLD,
) -> SampleProjection:
    """Least-squares first stage, optionally with covariate-cell fixed effects.

    Cells with fewer than two rows are dropped before demeaning and listed in
    ``dropped_cells``.
    """
    d = data.treatment_indicators(coding)
    n = coding.n
    keep = np.ones(data.n_obs, dtype=bool)
    dropped: list = []
    codes = None
    if fe_cell:
        if data.x_cell is None:
            raise ValidationError("fixed effects requested but the data has no cell column")
        dropped = data.degenerate_cells(min_rows=2)
        if dropped:
            keep = ~np.isin(data.x_cell, dropped)
        codes, _ = cell_codes(data.x_cell[keep])
    w = data.row_weights()[keep]
    z = data.z[keep]
    d = d[keep]
    if z.shape[0] <= z.shape[1] + n + (0 if codes is None else int(codes.max()) + 1):
        raise ValidationError("too few rows for the number of instruments, treatments and cells")
    if fe_cell:
        zz = _kernels.group_demean(z, codes, w)
        dd = _kernels.group_demean(d, codes, w)
        coef = _weighted_lstsq(zz, dd, w)
        fitted = zz @ coef
        coefs = ProjectionCoefficients(np.zeros(n), coef.T, True)
        regs = zz
    else:
        zc = z - np.average(z, axis=0, weights=w)
        _check_condition(zc.T @ (w[:, None] * zc) / w.sum(), "sample Var(Z)", cond_threshold)
        regs = np.column_stack([np.ones(z.shape[0]), z])
        coef = _weighted_lstsq(regs, d, w)
        fitted = regs @ coef
        coefs = ProjectionCoefficients(coef[0], coef[1:].T, False)
        dd = d
    pc = fitted - np.average(fitted, axis=0, weights=w)
    _check_condition(pc.T @ (w[:, None] * pc) / w.sum(), "sample Var(P), i.e. Cov(Z, D) lacks full column rank,", cond_threshold)
    return SampleProjection(fitted, dd, regs, coef, keep, dropped, codes, w, coefs)


def fit_projection(source, coding: TreatmentCoding | None = None, fe_cell: bool = False) -> ProjectionCoefficients:
    """Coefficients of the linear projection of D on Z.

    ``source`` is a :class:`Population` (exact moments) or a :class:`Dataset`
    (least squares, needs ``coding``).
    """
    if isinstance(source, Population):
        return population_projection(source).coefficients
    if isinstance(source, Dataset):
        if coding is None:
            raise ValidationError("a coding is required to project sample treatments")
        return sample_projection(source, coding, fe_cell).coefficients
    raise TypeError(f"cannot project {type(source).__name__}")


def residualize(values, weights, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Residual of column k on the other columns and a constant.

    Returns the residual and the coefficients on the other columns.
    """
    values = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    centered = values - w @ values
    target = centered[:, k]
    others = np.delete(centered, k, axis=1)
    if others.shape[1] == 0:
        return target, np.zeros(0)
    gram = others.T @ (w[:, None] * others)
    gamma = np.linalg.solve(gram, others.T @ (w * target))
    return target - others @ gamma, gamma


def fwl_residualize(projection, design_or_weights, k: int) -> np.ndarray:
    """Residual of P_k on the remaining predicted treatments, on the support.

    Accepts either ``(ProjectionCoefficients, InstrumentDesign)`` or raw
    ``(values, weights)``.
    """
    if isinstance(projection, ProjectionCoefficients):
        if not isinstance(design_or_weights, InstrumentDesign):
            raise TypeError("coefficients must be paired with an InstrumentDesign")
        values = projection.predict(design_or_weights.support)
        weights = design_or_weights.probs
    else:
        values, weights = projection, design_or_weights
    return residualize(values, weights, k)[0]


@dataclass(frozen=True)
class DemeanedData:
    """Outcome, coded treatments and instruments demeaned within cells."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    codes: np.ndarray
    labels: list
    weights: np.ndarray


def demean_within_cells(data: Dataset, coding: TreatmentCoding, cell_key: str | None = None) -> DemeanedData:
    """Subtract cell means from y, D and Z.

    ``cell_key`` names a flag column to use instead of ``x_cell``.
    """
    labels = data.x_cell if cell_key is None else data.flags.get(cell_key)
    if labels is None:
        raise ValidationError(f"no cell column {cell_key or 'x_cell'!r} in the data")
    uniq, counts = np.unique(labels, return_counts=True)
    bad = [u.item() if hasattr(u, "item") else u for u, c in zip(uniq, counts) if c < 2]
    if bad:
        raise DegenerateCellError(bad)
    codes, names = cell_codes(labels)
    w = data.row_weights()
    stacked = np.column_stack([data.y, data.treatment_indicators(coding), data.z])
    out = _kernels.group_demean(stacked, codes, w)
    n = coding.n
    return DemeanedData(out[:, 0], out[:, 1 : 1 + n], out[:, 1 + n :], codes, names, w)
