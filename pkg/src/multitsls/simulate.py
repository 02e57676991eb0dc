"""Data-generating processes: threshold-crossing choice, judge designs, sampling."""
from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .design import Dataset, InstrumentDesign, Population, TreatmentCoding, TypeComponent
from .errors import RankError, ShapeError, ValidationError

DEFAULT_GRID = 1001
BLOCK_ROWS = 8192
DECISIONS = {"A": 0, "C": 1, "I": 2}


def uniform_grid(size: int = DEFAULT_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Equally likely points 0, 1/(size-1), ..., 1."""
    return np.linspace(0.0, 1.0, size), np.full(size, 1.0 / size)


def midpoint_grid(cells: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Centres of ``cells`` equal slices of [0, 1].

    A cutoff of 1 - r is crossed by exactly a share r of the points whenever
    r is a multiple of 1/cells.
    """
    return (np.arange(cells) + 0.5) / cells, np.full(cells, 1.0 / cells)


@dataclass(frozen=True)
class ThresholdDesign:
    """Single-index ordered choice: treatment = #{k : u >= cutoffs[z, k]}.

    Rows of ``cutoffs`` follow the instrument support; each row must be
    non-decreasing so that higher treatments need a higher latent index.
    """

    instrument: InstrumentDesign
    cutoffs: np.ndarray
    u_grid: np.ndarray | None = None
    u_probs: np.ndarray | None = None

    def __post_init__(self):
        cut = np.asarray(self.cutoffs, dtype=np.float64)
        if cut.ndim != 2 or cut.shape[0] != self.instrument.n_points:
            raise ShapeError("cutoffs must have one row per support point")
        if np.any(np.diff(cut, axis=1) < 0):
            raise ValidationError("cutoffs must be non-decreasing in the treatment index")
        grid, probs = (self.u_grid, self.u_probs)
        if grid is None:
            grid, probs = uniform_grid()
        grid = np.asarray(grid, dtype=np.float64)
        probs = np.full(grid.size, 1.0 / grid.size) if probs is None else np.asarray(probs, dtype=np.float64)
        if probs.shape != grid.shape or abs(probs.sum() - 1) > 1e-12 or np.any(probs < 0):
            raise ValidationError("u_probs must be a probability vector matching u_grid")
        object.__setattr__(self, "cutoffs", cut)
        object.__setattr__(self, "u_grid", grid)
        object.__setattr__(self, "u_probs", probs)

    @property
    def n_treatments(self) -> int:
        return self.cutoffs.shape[1] + 1

    def assignments(self) -> np.ndarray:
        """Treatment at each (grid point, support point)."""
        return _kernels.threshold_assignments(self.u_grid, self.cutoffs)


def _effects_on_grid(effects, grid, n):
    """Normalise ``effects`` into (beta (G, n), y0 (G,))."""
    if effects is None:
        return np.zeros((grid.size, n)), np.zeros(grid.size)
    if callable(effects):
        out = [effects(u) for u in grid]
        if isinstance(out[0], tuple):
            betas = np.array([np.atleast_1d(b) for b, _ in out], dtype=np.float64)
            y0 = np.array([y for _, y in out], dtype=np.float64)
        else:
            betas = np.array([np.atleast_1d(b) for b in out], dtype=np.float64)
            y0 = np.zeros(grid.size)
        return betas, y0
    betas = np.asarray(effects, dtype=np.float64)
    if betas.ndim == 1:
        betas = np.broadcast_to(betas, (grid.size, n)).copy()
    return betas, np.zeros(grid.size)


def build_threshold_crossing_population(
    design: ThresholdDesign,
    effects: Callable | np.ndarray | None = None,
    coding: TreatmentCoding | None = None,
    cell=None,
) -> Population:
    """Population induced by a threshold model on a discrete latent grid.

    Grid points that induce the same assignment are merged; their effects and
    baselines are probability-weighted averages. ``effects`` is a function of
    u returning betas (or ``(betas, y0)``), a fixed beta vector, or a
    (grid, n) array.
    """
    coding = TreatmentCoding.ordered(design.n_treatments) if coding is None else coding
    grid, probs = design.u_grid, design.u_probs
    betas, y0 = _effects_on_grid(effects, grid, coding.n)
    if betas.shape != (grid.size, coding.n):
        raise ShapeError(f"effects must give {coding.n} values per grid point")
    comps = _merge(design.assignments(), probs, betas, y0, cell)
    return Population(design.instrument, coding, tuple(comps))


def _merge(assign, probs, betas, y0, cell):
    uniq, inverse = np.unique(assign, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    mass = np.bincount(inverse, weights=probs, minlength=len(uniq))
    comps = []
    for i, row in enumerate(uniq):
        if mass[i] <= 0:
            continue
        sel = inverse == i
        w = probs[sel] / mass[i]
        comps.append(TypeComponent(tuple(row), mass[i], w @ betas[sel], float(w @ y0[sel]), cell))
    return comps


@dataclass(frozen=True)
class Judge:
    """A judge's conviction and incarceration rates, caseload share and court."""

    conviction: float | None
    incarceration: float | None
    prob: float
    court: object = None


def _judge_support(n_judges: int) -> np.ndarray:
    """Indicators for judges 1..J-1; judge 0 is the omitted category."""
    return np.vstack([np.zeros(n_judges - 1), np.eye(n_judges - 1)])


def _parse_decisions(row) -> tuple[int, ...]:
    if isinstance(row, str):
        try:
            return tuple(DECISIONS[ch] for ch in row.upper() if not ch.isspace())
        except KeyError as exc:
            raise ValidationError(f"unknown decision letter {exc}") from None
    return tuple(int(v) for v in row)


def build_judge_design(
    judges: Sequence,
    casetypes: Sequence | None = None,
    effects: Callable | np.ndarray | None = None,
    u_grid: tuple[np.ndarray, np.ndarray] | None = None,
    rate_tol: float = 1e-9,
) -> Population:
    """Judge-leniency design with three ordered outcomes: acquit, convict, incarcerate.

    Instruments are judge indicators, so the first stage is saturated and the
    predicted treatments are the judges' conviction and incarceration rates.
    Without ``casetypes`` the defendants follow a threshold model with
    cutoffs 1 - rate on the latent grid (``midpoint_grid()`` by default, which
    reproduces rates given to three decimals exactly). With ``casetypes`` each entry is
    ``(decisions, prob[, beta[, y0[, court]]])`` where ``decisions`` lists one
    outcome per judge (letters A/C/I or 0/1/2); judge rates that are given are
    then checked against the rates the case types imply.

    Judges with a ``court`` form covariate cells; Pr(judge | court) is
    proportional to the judge's ``prob`` within the court.
    """
    judges = [j if isinstance(j, Judge) else Judge(*j) for j in judges]
    if len(judges) < 2:
        raise RankError("a single judge gives no instrument variation")
    courts = [j.court for j in judges]
    use_cells = any(c is not None for c in courts)
    support = _judge_support(len(judges))
    coding = TreatmentCoding.ordered(3)
    shares = np.array([j.prob for j in judges], dtype=np.float64)

    cell_designs = None
    court_mass = {}
    if use_cells:
        cell_designs = {}
        for court in dict.fromkeys(courts):
            members = np.array([c == court for c in courts])
            if members.sum() < 2:
                raise RankError(f"court {court!r} has a single judge, so no instrument variation")
            total = shares[members].sum()
            court_mass[court] = total
            cell_designs[court] = np.where(members, shares / total, 0.0)
        design = InstrumentDesign(support, shares / shares.sum())
    else:
        design = InstrumentDesign(support, shares)

    if casetypes is None:
        grid, probs = u_grid if u_grid is not None else midpoint_grid()
        comps = []
        for court in (dict.fromkeys(courts) if use_cells else [None]):
            cut = np.array(
                [[1 - j.conviction, 1 - j.incarceration] for j in judges], dtype=np.float64
            )
            if np.any(cut[:, 0] > cut[:, 1]):
                raise ValidationError("incarceration rates cannot exceed conviction rates")
            td = ThresholdDesign(design, cut, grid, probs)
            betas, y0 = _effects_on_grid(effects, td.u_grid, coding.n)
            scale = court_mass[court] / sum(court_mass.values()) if use_cells else 1.0
            comps.extend(_merge(td.assignments(), td.u_probs * scale, betas, y0, court))
        return Population(design, coding, tuple(comps), cell_designs)

    comps = []
    for entry in casetypes:
        decisions, prob, *rest = entry
        assignment = _parse_decisions(decisions)
        if len(assignment) != len(judges):
            raise ShapeError(f"case type {decisions!r} needs one decision per judge")
        beta = rest[0] if rest and rest[0] is not None else np.zeros(coding.n)
        y0 = rest[1] if len(rest) > 1 else 0.0
        court = rest[2] if len(rest) > 2 else None
        comps.append(TypeComponent(assignment, prob, beta, y0, court))
    pop = Population(design, coding, tuple(comps), cell_designs)
    _check_judge_rates(pop, judges, rate_tol)
    return pop


def _check_judge_rates(pop: Population, judges, tol):
    ind = pop.indicator_array().astype(np.float64)
    probs = pop.probs
    for cell in pop.cells:
        members = np.array([c.cell == cell for c in pop.components])
        q = probs[members].sum()
        rates = np.tensordot(probs[members] / q, ind[members], axes=1)  # (judges, 2)
        for j, judge in enumerate(judges):
            if cell is not None and judge.court != cell:
                continue
            for k, target in enumerate((judge.conviction, judge.incarceration)):
                if target is not None and abs(rates[j, k] - target) > tol:
                    raise ValidationError(
                        f"judge {j}: case types imply rate {rates[j, k]:.6g}, stated {target:.6g}"
                    )


def sample_dataset(
    pop: Population,
    n: int,
    seed: int,
    noise_sd: float = 1.0,
    flags: Mapping[str, Sequence[float]] | None = None,
    binary_cut: float | None = None,
    block_rows: int = BLOCK_ROWS,
    workers: int = 1,
) -> Dataset:
    """Draw ``n`` units: type, then instrument, then treatment and outcome.

    Rows are generated in fixed-size blocks, each with its own child stream
    of ``seed``, so any block can be produced independently and the result
    does not depend on how blocks are scheduled. ``flags`` maps a column name
    to per-component probabilities of the flag being set; flags depend on the
    type only, never on the instrument. With ``binary_cut`` the outcome is
    the indicator that the latent outcome exceeds the cut. ``workers > 1``
    draws blocks on a thread pool with identical results.
    """
    if n <= 0:
        raise ValidationError("sample size must be positive")
    flags = dict(flags or {})
    for name, p in flags.items():
        if len(p) != len(pop.components):
            raise ShapeError(f"flag {name!r} needs one probability per component")
    n_blocks = -(-n // block_rows)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    def block(b):
        rows = min(block_rows, n - b * block_rows)
        return _sample_block(pop, rows, np.random.default_rng(children[b]), noise_sd, flags)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(block, range(n_blocks)))
    else:
        parts = [block(b) for b in range(n_blocks)]
    y = np.concatenate([p[0] for p in parts])
    t = np.concatenate([p[1] for p in parts])
    zi = np.concatenate([p[2] for p in parts])
    comp = np.concatenate([p[3] for p in parts])
    flag_cols = {name: np.concatenate([p[4][name] for p in parts]) for name in flags}
    if binary_cut is not None:
        y = (y > binary_cut).astype(np.float64)
    cells = None
    if pop.has_cells:
        cell_labels = np.array([c.cell for c in pop.components], dtype=object)
        cells = cell_labels[comp]
        try:
            cells = cells.astype(np.int64)
        except (TypeError, ValueError):
            cells = cells.astype(str)
    return Dataset(y, t, pop.design.support[zi], cells, flag_cols)


def _sample_block(pop: Population, rows: int, rng: np.random.Generator, noise_sd, flags):
    probs = pop.probs
    comp = rng.choice(len(probs), size=rows, p=probs / probs.sum())
    zi = np.empty(rows, dtype=np.int64)
    u = rng.random(rows)
    if pop.has_cells:
        cell_of = np.array([pop.cells.index(c.cell) for c in pop.components])
        cdf = np.cumsum(np.array([pop.cell_designs[c] for c in pop.cells]), axis=1)
        row_cdf = cdf[cell_of[comp]]
        zi = (u[:, None] > row_cdf).sum(axis=1)
    else:
        zi = np.searchsorted(np.cumsum(pop.design.probs), u, side="right")
    zi = np.minimum(zi, pop.design.n_points - 1)
    t = pop.assignments[comp, zi]
    d = pop.coding.indicators(t).astype(np.float64)
    y = pop.y0s[comp] + np.einsum("ik,ik->i", d, pop.betas[comp]) + noise_sd * rng.standard_normal(rows)
    flag_cols = {name: rng.random(rows) < np.asarray(p, dtype=np.float64)[comp] for name, p in flags.items()}
    return y, t, zi, comp, flag_cols
