"""Instrument designs, treatment codings, response types, populations, data."""
from __future__ import annotations

import itertools
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import EnumerationTooLarge, ShapeError, ValidationError

PROB_TOL = 1e-12
ENUMERATION_CAP = 10**6


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_probs(probs, what):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValidationError(f"{what} must be a non-empty vector")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ValidationError(f"{what} must be finite and non-negative")
    if abs(probs.sum() - 1.0) > PROB_TOL * max(1, probs.size):
        raise ValidationError(f"{what} sum to {probs.sum():.15g}, not 1")
    return probs


@dataclass(frozen=True)
class InstrumentDesign:
    """Finite support for the instrument vector and its probabilities."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64)
        if support.ndim == 1:
            support = support[:, None]
        if support.ndim != 2:
            raise ShapeError("support must be a (points, instruments) array")
        probs = _check_probs(self.probs, "instrument probabilities")
        if support.shape[0] != probs.size:
            raise ShapeError(f"{support.shape[0]} support points but {probs.size} probabilities")
        if support.shape[0] < 2:
            raise ValidationError("an instrument needs at least two support points")
        if len({tuple(row) for row in support}) != support.shape[0]:
            raise ValidationError("support points must be distinct")
        object.__setattr__(self, "support", _frozen(support))
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def n_points(self) -> int:
        return self.support.shape[0]

    @property
    def m(self) -> int:
        return self.support.shape[1]

    def mean(self, probs=None) -> np.ndarray:
        probs = self.probs if probs is None else probs
        return probs @ self.support

    def covariance(self, probs=None) -> np.ndarray:
        probs = self.probs if probs is None else probs
        centered = self.support - self.mean(probs)
        return centered.T @ (probs[:, None] * centered)

    @classmethod
    def mutually_exclusive(cls, probs) -> InstrumentDesign:
        """Support {0, e_1, ..., e_n}: point v is the indicator of value v."""
        probs = np.asarray(probs, dtype=np.float64)
        n = probs.size - 1
        support = np.vstack([np.zeros(n), np.eye(n)])
        return cls(support, probs)

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping) -> InstrumentDesign:
        try:
            return cls(data["support"], data["probs"])
        except KeyError as exc:
            raise ValidationError(f"design is missing field {exc}") from None


@dataclass(frozen=True)
class TreatmentCoding:
    """Map from treatments 0..n_treatments-1 to binary indicators.

    Each indicator k compares two adjacent treatments ``edges[k] = (src, dst)``
    on a spanning tree; D_k is one when the realised treatment lies on the
    ``dst`` side of that edge, so its coefficient is Y(dst) - Y(src).
    """

    n_treatments: int
    edges: tuple[tuple[int, int], ...]
    kind: str = "graph"
    indicator_sets: tuple[frozenset, ...] = field(init=False)

    def __post_init__(self):
        n_t = int(self.n_treatments)
        if n_t < 2:
            raise ValidationError("need at least two treatments")
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        if len(edges) != n_t - 1:
            raise ValidationError(f"{n_t} treatments need {n_t - 1} edges, got {len(edges)}")
        for a, b in edges:
            if not (0 <= a < n_t and 0 <= b < n_t) or a == b:
                raise ValidationError(f"bad edge {(a, b)}")
        if self.kind not in {"unordered", "ordered", "graph"}:
            raise ValidationError(f"unknown coding kind {self.kind!r}")
        sets = []
        for idx, (src, dst) in enumerate(edges):
            rest = [e for j, e in enumerate(edges) if j != idx]
            side = _component(dst, rest)
            if src in side:
                raise ValidationError("edges must form a spanning tree (cycle detected)")
            sets.append(frozenset(side))
        reach = _component(0, list(edges))
        if len(reach) != n_t:
            raise ValidationError("edges must connect every treatment")
        object.__setattr__(self, "n_treatments", n_t)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "indicator_sets", tuple(sets))

    @classmethod
    def unordered(cls, n_treatments: int) -> TreatmentCoding:
        return cls(n_treatments, tuple((0, k) for k in range(1, n_treatments)), "unordered")

    @classmethod
    def ordered(cls, n_treatments: int) -> TreatmentCoding:
        return cls(n_treatments, tuple((k - 1, k) for k in range(1, n_treatments)), "ordered")

    @classmethod
    def from_edges(cls, n_treatments: int, edges) -> TreatmentCoding:
        return cls(n_treatments, tuple(tuple(e) for e in edges), "graph")

    @property
    def n(self) -> int:
        return self.n_treatments - 1

    def indicator_matrix(self) -> np.ndarray:
        """Row t holds the indicator vector of treatment t."""
        out = np.zeros((self.n_treatments, self.n), dtype=np.int8)
        for k, members in enumerate(self.indicator_sets):
            for t in members:
                out[t, k] = 1
        return out

    def indicators(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.n_treatments):
            raise ValidationError("treatment label out of range")
        return self.indicator_matrix()[t]

    def reconstruction(self) -> np.ndarray:
        """Matrix R with 1[T=t] = R[t-1] @ (D - D(0)) for t = 1..n.

        Equivalently the unordered indicators of treatments 1..n are linear
        combinations of the coded indicators after removing treatment 0's code.
        """
        mat = self.indicator_matrix().astype(np.float64)
        base = mat[0]
        lift = (mat[1:] - base).T  # column t-1 is D(t) - D(0)
        return np.rint(np.linalg.inv(lift)).astype(np.int64)

    def to_dict(self) -> dict:
        return {"n_treatments": self.n_treatments, "kind": self.kind, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, data: Mapping) -> TreatmentCoding:
        try:
            n_t = int(data["n_treatments"])
            kind = data.get("kind", "unordered")
        except KeyError as exc:
            raise ValidationError(f"coding is missing field {exc}") from None
        if kind == "unordered":
            return cls.unordered(n_t)
        if kind == "ordered":
            return cls.ordered(n_t)
        if "edges" not in data:
            raise ValidationError("graph coding needs an 'edges' list")
        return cls.from_edges(n_t, data["edges"])


def _component(start, edges) -> set:
    seen = {start}
    frontier = [start]
    while frontier:
        node = frontier.pop()
        for a, b in edges:
            for x, y in ((a, b), (b, a)):
                if x == node and y not in seen:
                    seen.add(y)
                    frontier.append(y)
    return seen


@dataclass(frozen=True)
class ResponseType:
    """Treatment chosen at each support point, in support order."""

    assignment: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))

    def __len__(self):
        return len(self.assignment)

    def __str__(self):
        return "(" + ",".join(map(str, self.assignment)) + ")"


def enumerate_response_types(
    design: InstrumentDesign, n_treatments: int, cap: int = ENUMERATION_CAP
) -> list[ResponseType]:
    """All maps from support points to treatments, in lexicographic order."""
    total = n_treatments**design.n_points
    if total > cap:
        raise EnumerationTooLarge(f"{n_treatments}^{design.n_points} = {total} types exceeds cap {cap}")
    return [ResponseType(a) for a in itertools.product(range(n_treatments), repeat=design.n_points)]


def indicator_path(rtype, coding: TreatmentCoding) -> np.ndarray:
    """Coded indicators of a type at each support point, shape (points, n)."""
    assignment = rtype.assignment if isinstance(rtype, ResponseType) else tuple(rtype)
    return coding.indicators(np.asarray(assignment, dtype=np.int64))


@dataclass(frozen=True)
class TypeComponent:
    """A response type with its mass, effects and baseline outcome.

    ``beta`` holds one effect per coded indicator; ``cell`` optionally places
    the component in a covariate cell.
    """

    assignment: tuple[int, ...]
    prob: float
    beta: np.ndarray
    y0: float = 0.0
    cell: Hashable | None = None

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta)))
        object.__setattr__(self, "prob", float(self.prob))
        object.__setattr__(self, "y0", float(self.y0))


@dataclass(frozen=True)
class Population:
    """Mixture of response types over an instrument design.

    Without cells the instrument is drawn from ``design.probs``. With cells,
    ``cell_designs[c]`` holds Pr(Z = z | X = c) over the shared support and the
    component probabilities are joint Pr(S = s, X = c).
    """

    design: InstrumentDesign
    coding: TreatmentCoding
    components: tuple[TypeComponent, ...]
    cell_designs: Mapping[Hashable, np.ndarray] | None = None

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValidationError("a population needs at least one type")
        n_pts, n = self.design.n_points, self.coding.n
        for c in comps:
            if len(c.assignment) != n_pts:
                raise ShapeError(f"type {c.assignment} has {len(c.assignment)} entries, design has {n_pts} points")
            if min(c.assignment) < 0 or max(c.assignment) >= self.coding.n_treatments:
                raise ValidationError(f"type {c.assignment} uses an unknown treatment")
            if c.beta.shape != (n,):
                raise ShapeError(f"type {c.assignment} has {c.beta.size} effects, coding has {n}")
        _check_probs([c.prob for c in comps], "type probabilities")
        cells = {c.cell for c in comps}
        if self.cell_designs is None:
            if cells != {None}:
                raise ValidationError("components carry cells but no cell_designs were given")
        else:
            fixed = {}
            for key, probs in self.cell_designs.items():
                probs = _check_probs(probs, f"instrument probabilities in cell {key!r}")
                if probs.size != n_pts:
                    raise ShapeError(f"cell {key!r} has {probs.size} probabilities for {n_pts} points")
                fixed[key] = _frozen(probs)
            missing = cells - set(fixed)
            if missing:
                raise ValidationError(f"no instrument distribution for cells {sorted(map(str, missing))}")
            object.__setattr__(self, "cell_designs", {k: fixed[k] for k in _ordered_cells(cells)})
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_types(cls, design, coding, types: Iterable, cell_designs=None) -> Population:
        """Build from ``(assignment, prob[, beta[, y0[, cell]]])`` tuples or dicts."""
        comps = []
        for item in types:
            if isinstance(item, TypeComponent):
                comps.append(item)
                continue
            if isinstance(item, Mapping):
                item = (item["assignment"], item["prob"], item.get("beta"), item.get("y0", 0.0), item.get("cell"))
            assignment, prob, *rest = item
            beta = rest[0] if rest and rest[0] is not None else np.zeros(coding.n)
            y0 = rest[1] if len(rest) > 1 else 0.0
            cell = rest[2] if len(rest) > 2 else None
            comps.append(TypeComponent(tuple(assignment), prob, beta, y0, cell))
        return cls(design, coding, tuple(comps), cell_designs)

    @property
    def n(self) -> int:
        return self.coding.n

    @property
    def probs(self) -> np.ndarray:
        return np.array([c.prob for c in self.components])

    @property
    def assignments(self) -> np.ndarray:
        return np.array([c.assignment for c in self.components], dtype=np.int64)

    @property
    def betas(self) -> np.ndarray:
        return np.array([c.beta for c in self.components])

    @property
    def y0s(self) -> np.ndarray:
        return np.array([c.y0 for c in self.components])

    @property
    def has_cells(self) -> bool:
        return self.cell_designs is not None

    @property
    def cells(self) -> list:
        return list(self.cell_designs) if self.has_cells else [None]

    def indicator_array(self) -> np.ndarray:
        """Coded indicators, shape (components, points, n)."""
        return self.coding.indicator_matrix()[self.assignments]

    def z_probs(self, cell=None) -> np.ndarray:
        return self.design.probs if cell is None or not self.has_cells else self.cell_designs[cell]

    def with_effects(self, betas, y0s=None) -> Population:
        betas = np.asarray(betas, dtype=np.float64)
        y0s = self.y0s if y0s is None else np.asarray(y0s, dtype=np.float64)
        comps = tuple(
            TypeComponent(c.assignment, c.prob, b, y, c.cell) for c, b, y in zip(self.components, betas, y0s)
        )
        return Population(self.design, self.coding, comps, self.cell_designs)

    def to_dict(self) -> dict:
        out = {
            "design": self.design.to_dict(),
            "coding": self.coding.to_dict(),
            "types": [
                {"assignment": list(c.assignment), "prob": c.prob, "beta": c.beta.tolist(), "y0": c.y0}
                | ({"cell": c.cell} if c.cell is not None else {})
                for c in self.components
            ],
        }
        if self.has_cells:
            out["cell_designs"] = [{"cell": k, "probs": v.tolist()} for k, v in self.cell_designs.items()]
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> Population:
        for key in ("design", "coding", "types"):
            if key not in data:
                raise ValidationError(f"population is missing field {key!r}")
        design = InstrumentDesign.from_dict(data["design"])
        coding = TreatmentCoding.from_dict(data["coding"])
        cell_designs = None
        if data.get("cell_designs") is not None:
            cell_designs = {entry["cell"]: entry["probs"] for entry in data["cell_designs"]}
        for entry in data["types"]:
            if "assignment" not in entry or "prob" not in entry:
                raise ValidationError("each type needs 'assignment' and 'prob'")
        return cls.from_types(design, coding, data["types"], cell_designs)


def _ordered_cells(cells):
    try:
        return sorted(cells)
    except TypeError:
        return sorted(cells, key=repr)


@dataclass(frozen=True)
class Dataset:
    """Observed outcome, treatment label and instruments, one row per unit."""

    y: np.ndarray
    t: np.ndarray
    z: np.ndarray
    x_cell: np.ndarray | None = None
    flags: Mapping[str, np.ndarray] = field(default_factory=dict)
    weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        t = np.asarray(self.t)
        if t.size and not np.all(np.equal(np.mod(t, 1), 0)):
            raise ValidationError("treatment labels must be integers")
        t = t.astype(np.int64).ravel()
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        n_obs = y.size
        if t.size != n_obs or z.shape[0] != n_obs:
            raise ShapeError("y, t and z must have the same number of rows")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(z)):
            raise ValidationError("non-finite values in y or z")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "z", z)
        if self.x_cell is not None:
            cells = np.asarray(self.x_cell).ravel()
            if cells.size != n_obs:
                raise ShapeError("x_cell must have one entry per row")
            object.__setattr__(self, "x_cell", cells)
        flags = {}
        for name, col in dict(self.flags).items():
            col = np.asarray(col).ravel()
            if col.size != n_obs:
                raise ShapeError(f"flag {name!r} must have one entry per row")
            flags[name] = col.astype(bool)
        object.__setattr__(self, "flags", flags)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.size != n_obs or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValidationError("weights must be finite, non-negative, one per row")
            object.__setattr__(self, "weights", w)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def m(self) -> int:
        return self.z.shape[1]

    def row_weights(self) -> np.ndarray:
        return np.ones(self.n_obs) if self.weights is None else self.weights

    def degenerate_cells(self, min_rows: int | None = None) -> list:
        """Cells with fewer than ``min_rows`` rows (default m + 1)."""
        if self.x_cell is None:
            return []
        min_rows = self.m + 1 if min_rows is None else min_rows
        labels, counts = np.unique(self.x_cell, return_counts=True)
        return [lab.item() if hasattr(lab, "item") else lab for lab, c in zip(labels, counts) if c < min_rows]

    def subset(self, mask) -> Dataset:
        mask = np.asarray(mask)
        return Dataset(
            self.y[mask],
            self.t[mask],
            self.z[mask],
            None if self.x_cell is None else self.x_cell[mask],
            {k: v[mask] for k, v in self.flags.items()},
            None if self.weights is None else self.weights[mask],
        )

    def treatment_indicators(self, coding: TreatmentCoding) -> np.ndarray:
        return coding.indicators(self.t).astype(np.float64)


def cell_codes(labels) -> tuple[np.ndarray, list]:
    """Integer codes 0..G-1 for arbitrary cell labels, plus the label list."""
    uniq, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.astype(np.int64).ravel(), list(uniq)


def as_type_tuple(rtype) -> tuple[int, ...]:
    if isinstance(rtype, ResponseType):
        return rtype.assignment
    if isinstance(rtype, TypeComponent):
        return rtype.assignment
    if isinstance(rtype, str):
        return tuple(int(ch) for ch in rtype if ch.isdigit())
    return tuple(int(a) for a in rtype)


Types = Sequence[tuple[int, ...]]
