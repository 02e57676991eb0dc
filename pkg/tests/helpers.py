"""Shared populations and brute-force reference computations for the tests.

The references expand a population into explicit (type, instrument) rows and
run plain weighted least squares, so they share no code with the package's
moment-based formulas.
"""
from __future__ import annotations

import itertools

import numpy as np

from multitsls import InstrumentDesign, Population, TreatmentCoding, build_judge_design
from multitsls.simulate import Judge
from multitsls.errors import RankError

THIRD = 1 / 3
TWO_INSTRUMENTS = InstrumentDesign([[0, 0], [1, 0], [0, 1]], [THIRD, THIRD, 1 - 2 * THIRD])

# Mixture whose first stage is P1 = 0.1 + 0.4 Z1, P2 = 0.2 + 0.5 Z2.
TWO_INSTRUMENT_TYPES = [
    ((1, 1, 1), 0.1),
    ((0, 1, 0), 0.1),
    ((0, 1, 2), 0.2),
    ((2, 1, 2), 0.1),
    ((0, 0, 2), 0.2),
    ((2, 2, 2), 0.1),
    ((0, 2, 2), 0.1),
    ((0, 0, 0), 0.1),
]

PADDED_TYPES = [(0, 0, 0), (1, 1, 1), (2, 2, 2), (0, 1, 0), (0, 0, 2), (0, 1, 2)]

PADDED_TYPES_FOUR = [
    (0, 0, 0, 0), (1, 1, 1, 1), (2, 2, 2, 2), (3, 3, 3, 3),
    (0, 1, 0, 0), (0, 0, 2, 0), (0, 0, 0, 3),
    (0, 1, 2, 0), (0, 1, 0, 3), (0, 0, 2, 3), (0, 1, 2, 3),
]

ORDERED_ALLOWED = [(0, 0, 0), (1, 1, 1), (2, 2, 2), (0, 1, 0), (1, 1, 2)]


def two_instrument_population(betas=None) -> Population:
    coding = TreatmentCoding.unordered(3)
    types = []
    for i, (a, p) in enumerate(TWO_INSTRUMENT_TYPES):
        beta = np.zeros(2) if betas is None else betas[i]
        types.append((a, p, beta))
    return Population.from_types(TWO_INSTRUMENTS, coding, types)


def just_identified_population(types, probs=None, design_probs=(0.3, 0.35, 0.35), coding=None, betas=None):
    n_t = len(types[0])
    design = InstrumentDesign.mutually_exclusive(np.asarray(design_probs[:n_t]) / np.sum(design_probs[:n_t]))
    coding = TreatmentCoding.unordered(n_t) if coding is None else coding
    probs = np.full(len(types), 1 / len(types)) if probs is None else np.asarray(probs)
    probs = probs / probs.sum()
    rows = []
    for i, (a, p) in enumerate(zip(types, probs)):
        beta = np.zeros(coding.n) if betas is None else betas[i]
        rows.append((a, p, beta))
    return Population.from_types(design, coding, rows)


def random_coding(rng, n_t) -> TreatmentCoding:
    kind = rng.integers(3)
    if kind == 0:
        return TreatmentCoding.unordered(n_t)
    if kind == 1:
        return TreatmentCoding.ordered(n_t)
    # random spanning tree: attach each new node to an earlier one
    order = rng.permutation(n_t)
    edges = []
    for i in range(1, n_t):
        a, b = order[rng.integers(i)], order[i]
        edges.append((a, b) if rng.random() < 0.5 else (b, a))
    return TreatmentCoding.from_edges(n_t, edges)


def random_population(rng, max_tries=200) -> Population:
    """Random design (3-6 points), 3-4 treatments, random types and effects."""
    for _ in range(max_tries):
        n_pts = int(rng.integers(3, 7))
        n_t = int(rng.integers(3, 5))
        n = n_t - 1
        if n > n_pts - 1:
            continue
        m = int(rng.integers(n, n_pts))
        support = rng.uniform(0, 1, size=(n_pts, m))
        probs = rng.dirichlet(np.full(n_pts, 2.0)) * 0.9 + 0.1 / n_pts
        probs /= probs.sum()
        design = InstrumentDesign(support, probs)
        if np.linalg.cond(design.covariance()) > 1e6:
            continue
        coding = random_coding(rng, n_t)
        n_types = int(rng.integers(n_t + 1, 12))
        assignments = rng.integers(0, n_t, size=(n_types, n_pts))
        tp = rng.dirichlet(np.ones(n_types))
        betas = rng.normal(size=(n_types, n))
        y0 = rng.normal(size=n_types)
        pop = Population.from_types(design, coding, [(a, p, b, y) for a, p, b, y in zip(assignments, tp, betas, y0)])
        try:
            from multitsls.projection import population_projection

            proj = population_projection(pop)
        except RankError:
            continue
        if np.linalg.cond(proj.variance()) > 1e6:
            continue
        return pop
    raise RuntimeError("no well-conditioned population found")


def rounding_tol(pop: Population, base: float = 1e-10) -> float:
    """Absolute tolerance for comparing two routes to the estimand.

    ``base`` plus the usual forward-error bound cond(Var P) * eps * scale,
    where scale is the summed size of the terms Pr[s] |w_s| |beta_s|.
    """
    from multitsls.oracle import component_weights
    from multitsls.projection import population_projection

    cond = np.linalg.cond(population_projection(pop).variance())
    terms = np.einsum("s,skl,sl->k", pop.probs, np.abs(component_weights(pop)), np.abs(pop.betas))
    return base + cond * np.finfo(float).eps * float(terms.max())


def expand_rows(pop: Population):
    """Explicit (cell, z, type) rows with probabilities for brute-force fits."""
    rows = []
    for s, comp in enumerate(pop.components):
        zp = pop.z_probs(comp.cell)
        for j in range(pop.design.n_points):
            if zp[j] > 0 and comp.prob > 0:
                rows.append((s, j, comp.prob * zp[j]))
    s_idx = np.array([r[0] for r in rows])
    z_idx = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows])
    return s_idx, z_idx, w


def _wls(X, Y, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], Y * sw[:, None] if Y.ndim == 2 else Y * sw, rcond=None)
    return coef


def brute_force_weights(pop: Population, rtype=None) -> np.ndarray:
    """Weights by regressing type indicators on fitted P (no covariates).

    Without ``rtype`` returns the weights of every component.
    """
    s_idx, z_idx, w = expand_rows(pop)
    Z = pop.design.support[z_idx]
    D = pop.indicator_array()[s_idx, z_idx].astype(float)
    X1 = np.column_stack([np.ones(len(w)), Z])
    P = X1 @ _wls(X1, D, w)
    XP = np.column_stack([np.ones(len(w)), P])
    targets = [rtype] if rtype is not None else [c.assignment for c in pop.components]
    out = []
    for a in targets:
        v = pop.coding.indicators(np.asarray(a))[z_idx].astype(float)
        coef = _wls(XP, v, w)[1:]  # (n regressors P_k, n outcomes l)
        out.append(coef)
    out = np.array(out)
    return out[0] if rtype is not None else out


def brute_force_tsls(pop: Population) -> np.ndarray:
    """Explicit two-stage regression on the expanded population."""
    s_idx, z_idx, w = expand_rows(pop)
    Z = pop.design.support[z_idx]
    D = pop.indicator_array()[s_idx, z_idx].astype(float)
    Y = pop.y0s[s_idx] + np.einsum("ik,ik->i", D, pop.betas[s_idx])
    X1 = np.column_stack([np.ones(len(w)), Z])
    P = X1 @ _wls(X1, D, w)
    return _wls(np.column_stack([np.ones(len(w)), P]), Y, w)[1:]


def all_types(n_points, n_treatments):
    return list(itertools.product(range(n_treatments), repeat=n_points))


def court_design(types_by_court):
    judges = []
    rows = []
    for court, (rates, casetypes) in types_by_court.items():
        for rate in rates:
            conv, inc = rate if rate is not None else (None, None)
            judges.append(Judge(conv, inc, 1.0, court))
    n_j = len(judges)
    offset = 0
    for court, (rates, casetypes) in types_by_court.items():
        for decisions, prob in casetypes:
            full = ["A"] * n_j
            full[offset : offset + len(rates)] = list(decisions)
            rows.append(("".join(full), prob * 0.5, None, 0.0, court))
        offset += len(rates)
    return build_judge_design(judges, casetypes=rows)


COURT_TYPES = [("CCC", 0.3), ("ACC", 0.1), ("AAC", 0.1), ("AII", 0.1), ("IIC", 0.1), ("III", 0.05), ("AAA", 0.25)]
OTHER_COURT_TYPES = [("CCC", 0.2), ("ACI", 0.2), ("AAC", 0.1), ("CIC", 0.1), ("AAA", 0.4)]
