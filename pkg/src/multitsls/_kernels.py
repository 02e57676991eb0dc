"""Hot loops with a numba implementation and a pure-numpy twin.

Set ``MULTITSLS_DISABLE_NUMBA=1`` before import to force the numpy versions.
Both implementations are always importable so they can be benchmarked and
cross-checked against each other in one process.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = "MULTITSLS_DISABLE_NUMBA"
USE_NUMBA = numba is not None and os.environ.get(_FLAG, "").strip().lower() not in {
    "1",
    "true",
    "yes",
    "on",
}
BACKEND = "numba" if USE_NUMBA else "numpy"


# --- group demeaning -------------------------------------------------------

def group_demean_numpy(values, codes, weights, n_groups):
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    wsum = np.bincount(codes, weights=weights, minlength=n_groups)
    for j in range(values.shape[1]):
        col = values[:, j]
        means = np.bincount(codes, weights=weights * col, minlength=n_groups) / wsum
        out[:, j] = col - means[codes]
    return out


def _group_demean_loop(values, codes, weights, n_groups):
    n, p = values.shape
    sums = np.zeros((n_groups, p))
    wsum = np.zeros(n_groups)
    for i in range(n):
        g = codes[i]
        wsum[g] += weights[i]
        for j in range(p):
            sums[g, j] += weights[i] * values[i, j]
    out = np.empty((n, p))
    for i in range(n):
        g = codes[i]
        for j in range(p):
            out[i, j] = values[i, j] - sums[g, j] / wsum[g]
    return out


# --- heteroskedasticity-robust meat -----------------------------------------

def score_outer_numpy(X, U, weights):
    """Sum of w_i * s_i s_i' with s_i = vec(x_i u_i'), equation-major."""
    n, p = X.shape
    q = U.shape[1]
    S = (U[:, :, None] * X[:, None, :]).reshape(n, q * p)
    S *= np.sqrt(weights)[:, None]
    return S.T @ S


def _score_outer_loop(X, U, weights):
    n, p = X.shape
    q = U.shape[1]
    d = p * q
    out = np.zeros((d, d))
    s = np.empty(d)
    for i in range(n):
        for a in range(q):
            for b in range(p):
                s[a * p + b] = U[i, a] * X[i, b]
        w = weights[i]
        for r in range(d):
            sr = w * s[r]
            for c in range(r, d):
                out[r, c] += sr * s[c]
    for r in range(d):
        for c in range(r):
            out[r, c] = out[c, r]
    return out


# --- threshold crossing ------------------------------------------------------

def threshold_assignments_numpy(u, cutoffs):
    """Count cutoffs at or below each latent value: result[g, z]."""
    return (u[:, None, None] >= cutoffs[None, :, :]).sum(axis=2).astype(np.int64)


def _threshold_assignments_loop(u, cutoffs):
    n_grid = u.shape[0]
    n_z, n_k = cutoffs.shape
    out = np.zeros((n_grid, n_z), dtype=np.int64)
    for g in range(n_grid):
        for z in range(n_z):
            c = 0
            for k in range(n_k):
                if u[g] >= cutoffs[z, k]:
                    c += 1
            out[g, z] = c
    return out


# --- pairwise monotonicity ---------------------------------------------------

def monotone_pairs_numpy(ind):
    """ind[type, z, k] in {0,1}; result[k, z, z'] is True when every type moves
    indicator k in the same weak direction between z and z'."""
    ind = np.asarray(ind, dtype=np.int8)
    out = np.empty((ind.shape[2], ind.shape[1], ind.shape[1]), dtype=np.bool_)
    for k in range(ind.shape[2]):
        col = ind[:, :, k]
        diff = col[:, :, None] - col[:, None, :]
        out[k] = ~((diff > 0).any(axis=0) & (diff < 0).any(axis=0))
    return out


def _monotone_pairs_loop(ind):
    n_t, n_z, n_k = ind.shape
    out = np.ones((n_k, n_z, n_z), dtype=np.bool_)
    for k in range(n_k):
        for a in range(n_z):
            for b in range(a + 1, n_z):
                up = False
                down = False
                for t in range(n_t):
                    d = ind[t, a, k] - ind[t, b, k]
                    if d > 0:
                        up = True
                    elif d < 0:
                        down = True
                ok = not (up and down)
                out[k, a, b] = ok
                out[k, b, a] = ok
    return out


if numba is not None:
    group_demean_numba = numba.njit(cache=True)(_group_demean_loop)
    score_outer_numba = numba.njit(cache=True)(_score_outer_loop)
    threshold_assignments_numba = numba.njit(cache=True)(_threshold_assignments_loop)
    _monotone_pairs_jit = numba.njit(cache=True)(_monotone_pairs_loop)

    def monotone_pairs_numba(ind):
        return _monotone_pairs_jit(np.ascontiguousarray(ind, dtype=np.int8))
else:  # pragma: no cover
    group_demean_numba = group_demean_numpy
    score_outer_numba = score_outer_numpy
    threshold_assignments_numba = threshold_assignments_numpy
    monotone_pairs_numba = monotone_pairs_numpy

IMPLEMENTATIONS = {
    "group_demean": (group_demean_numpy, group_demean_numba),
    "score_outer": (score_outer_numpy, score_outer_numba),
    "threshold_assignments": (threshold_assignments_numpy, threshold_assignments_numba),
    "monotone_pairs": (monotone_pairs_numpy, monotone_pairs_numba),
}


def _pick(name):
    numpy_fn, numba_fn = IMPLEMENTATIONS[name]
    return numba_fn if USE_NUMBA else numpy_fn


def group_demean(values, codes, weights=None):
    """Subtract (weighted) group means from each column of ``values``."""
    values = np.ascontiguousarray(np.atleast_2d(np.asarray(values, dtype=np.float64).T).T)
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    if weights is None:
        weights = np.ones(values.shape[0])
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    n_groups = int(codes.max()) + 1 if codes.size else 0
    return _pick("group_demean")(values, codes, weights, n_groups)


def score_outer(X, U, weights=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    U = np.ascontiguousarray(np.atleast_2d(np.asarray(U, dtype=np.float64).T).T)
    if weights is None:
        weights = np.ones(X.shape[0])
    return _pick("score_outer")(X, U, np.ascontiguousarray(weights, dtype=np.float64))


def threshold_assignments(u, cutoffs):
    u = np.ascontiguousarray(u, dtype=np.float64)
    cutoffs = np.ascontiguousarray(cutoffs, dtype=np.float64)
    return _pick("threshold_assignments")(u, cutoffs)


def monotone_pairs(ind):
    return _pick("monotone_pairs")(np.ascontiguousarray(ind, dtype=np.int8))
