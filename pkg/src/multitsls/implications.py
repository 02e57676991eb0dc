"""Sample tests of the restrictions that proper weights place on the data.

Every test regresses some outcome on the first-stage fitted values and checks
sign and zero restrictions on the coefficients with HC0 standard errors.
Inequalities get one-sided z tests, the zero restrictions a joint Wald test,
and the overall verdict is a Bonferroni combination of those pieces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels
from .design import Dataset, Population, TreatmentCoding, cell_codes
from .errors import ShapeError, ValidationError
from .projection import population_projection, sample_projection

ALPHA = 0.05
DEFAULT_BOOT = 999
DEFAULT_BINS = 10


@dataclass(frozen=True)
class Hypothesis:
    label: str
    kind: str  # ">=0", "<=0" or "=0"
    estimate: float
    se: float
    p_value: float
    in_verdict: bool = True

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "kind": self.kind,
            "estimate": self.estimate,
            "se": self.se,
            "p_value": self.p_value,
            "in_verdict": self.in_verdict,
        }


@dataclass(frozen=True)
class TestReport:
    name: str
    row_labels: list
    col_labels: list
    coef: np.ndarray
    se: np.ndarray
    hypotheses: list
    wald: dict | None
    overall_p: float
    alpha: float
    n_obs: int
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    @property
    def reject(self) -> bool:
        return self.overall_p < self.alpha

    def to_dict(self) -> dict:
        return {
            "test": self.name,
            "rows": self.row_labels,
            "columns": self.col_labels,
            "coef": self.coef.tolist(),
            "se": self.se.tolist(),
            "hypotheses": [h.to_dict() for h in self.hypotheses],
            "wald": self.wald,
            "overall_p": self.overall_p,
            "alpha": self.alpha,
            "reject": self.reject,
            "n_obs": self.n_obs,
            "notes": self.notes,
            "extra": _jsonable(self.extra),
        }

    def to_text(self) -> str:
        return format_table(self)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _stars(p):
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def format_table(report: TestReport) -> str:
    """Plain-text table: coefficients with standard errors, then restrictions."""
    width = max(12, *(len(c) + 2 for c in report.col_labels))
    lead = max(14, *(len(r) + 2 for r in report.row_labels))
    lines = [report.name, "=" * (lead + width * len(report.col_labels))]
    lines.append(" " * lead + "".join(c.rjust(width) for c in report.col_labels))
    for i, row in enumerate(report.row_labels):
        coef = "".join(f"{report.coef[i, j]:.4f}{_stars(_two_sided(report.coef[i, j], report.se[i, j]))}".rjust(width)
                       for j in range(len(report.col_labels)))
        ses = "".join(f"({report.se[i, j]:.4f})".rjust(width) for j in range(len(report.col_labels)))
        lines += [row.ljust(lead) + coef, " " * lead + ses]
    lines.append("-" * (lead + width * len(report.col_labels)))
    heads = [f"H0: {h.label} {h.kind[:-1]} 0" for h in report.hypotheses]
    pad = max([lead + 24, *(len(x) + 2 for x in heads)])
    for head, h in zip(heads, report.hypotheses):
        tag = "" if h.in_verdict else "  [reported only]"
        lines.append(head.ljust(pad) + f"p = {h.p_value:.4f}{tag}")
    if report.wald is not None:
        lines.append(
            f"joint zero restrictions: chi2({report.wald['df']}) = {report.wald['stat']:.3f}, p = {report.wald['p_value']:.4f}"
        )
    verdict = "reject" if report.reject else "do not reject"
    lines.append(f"overall (Bonferroni) p = {report.overall_p:.4f} -> {verdict} at {report.alpha:g}")
    lines.append(f"observations: {report.n_obs}")
    lines += [f"note: {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def _two_sided(est, se):
    if se <= 0 or not np.isfinite(se):
        return 1.0
    return float(2 * stats.norm.sf(abs(est / se)))


def _p_value(kind, est, se):
    if se <= 0 or not np.isfinite(se):
        return 1.0 if (kind == ">=0" and est >= 0) or (kind == "<=0" and est <= 0) or (kind == "=0" and est == 0) else 0.0
    t = est / se
    if kind == ">=0":
        return float(stats.norm.cdf(t))
    if kind == "<=0":
        return float(stats.norm.sf(t))
    return float(2 * stats.norm.sf(abs(t)))


def regress_hc0(Y, X, weights=None, codes=None):
    """OLS of each column of Y on X with cell fixed effects or a constant.

    Returns coefficients on X shaped (outcomes, regressors) and the HC0
    covariance of their row-major vectorisation.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64).T).T
    X = np.atleast_2d(np.asarray(X, dtype=np.float64).T).T
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if codes is not None:
        stacked = _kernels.group_demean(np.hstack([Y, X]), codes, w)
        Y, X = stacked[:, : Y.shape[1]], stacked[:, Y.shape[1] :]
        regs, drop = X, 0
    else:
        regs, drop = np.column_stack([np.ones(X.shape[0]), X]), 1
    sw = np.sqrt(w)[:, None]
    q, r = np.linalg.qr(regs * sw)
    coef = np.linalg.solve(r, q.T @ (Y * sw))  # (p, outcomes)
    resid = Y - regs @ coef
    r_inv = np.linalg.inv(r)
    bread = r_inv @ r_inv.T
    meat = _kernels.score_outer(regs, resid, w)
    n_out, p = Y.shape[1], regs.shape[1]
    big_bread = np.kron(np.eye(n_out), bread)
    vcov = big_bread @ meat @ big_bread
    keep = np.concatenate([np.arange(drop, p) + j * p for j in range(n_out)])
    return coef[drop:].T, vcov[np.ix_(keep, keep)]


def _assemble(name, rows, cols, coef, vcov, restrictions, alpha, n_obs, notes=None, extra=None):
    """Build hypotheses from ``restrictions``: (label, kind, vector, in_verdict)."""
    se = np.sqrt(np.clip(np.diag(vcov), 0, None)).reshape(coef.shape)
    flat = coef.ravel()
    hyps, eq_rows = [], []
    for label, kind, vec, in_verdict in restrictions:
        est = float(vec @ flat)
        s = float(np.sqrt(max(vec @ vcov @ vec, 0.0)))
        hyps.append(Hypothesis(label, kind, est, s, _p_value(kind, est, s), in_verdict))
        if kind == "=0" and in_verdict:
            eq_rows.append(vec)
    wald = None
    pieces = [h.p_value for h in hyps if h.in_verdict and h.kind != "=0"]
    if eq_rows:
        R = np.array(eq_rows)
        est = R @ flat
        cov = R @ vcov @ R.T
        rank = np.linalg.matrix_rank(cov)
        stat = float(est @ np.linalg.pinv(cov) @ est)
        p = float(stats.chi2.sf(stat, rank)) if rank > 0 else 1.0
        wald = {"stat": stat, "df": int(rank), "p_value": p}
        pieces.append(p)
    overall = min(1.0, len(pieces) * min(pieces)) if pieces else 1.0
    return TestReport(name, rows, cols, coef, se, hyps, wald, overall, alpha, n_obs, notes or [], extra or {})


def _unit(shape, *entries):
    vec = np.zeros(int(np.prod(shape)))
    for (i, j), s in entries:
        vec[i * shape[1] + j] = s
    return vec


def _indicator_label(row):
    terms = []
    for k, c in enumerate(row):
        if c == 0:
            continue
        sign = "-" if c < 0 else ("+" if terms else "")
        mag = "" if abs(c) == 1 else f"{abs(c)}"
        terms.append(f"{sign}{mag}D{k + 1}")
    return "(" + "".join(terms) + ")"


def kitagawa_test(
    data: Dataset,
    coding: TreatmentCoding,
    bins=None,
    fe_cell: bool = False,
    alpha: float = ALPHA,
) -> TestReport:
    """Outcome-bin indicators times treatment indicators, regressed on P.

    For each bin B and treatment t >= 1 the outcome 1[Y in B] 1[T = t] is
    regressed on the fitted values. Writing 1[T = t] as a combination of the
    coded indicators with coefficients c_t, proper weights imply that the
    coefficient on P_k has the sign of c_t[k] and vanishes when c_t[k] = 0.

    Binary outcomes use the bins {1} and {0}; otherwise ``bins`` is a bin
    count (quantile bins, deciles by default) or an explicit edge array.
    """
    fs = sample_projection(data, coding, fe_cell)
    y = data.y[fs.keep]
    t = data.t[fs.keep]
    w = fs.weights
    recon = coding.reconstruction()  # row t-1 expresses 1[T=t] in coded indicators
    binary = np.all(np.isin(y, (0.0, 1.0)))
    if binary and bins is None:
        masks = [("Y", y == 1), ("(1-Y)", y == 0)]
    else:
        if bins is None:
            bins = DEFAULT_BINS
        edges = np.quantile(y, np.linspace(0, 1, int(bins) + 1)) if np.isscalar(bins) else np.asarray(bins, float)
        edges = np.unique(edges)
        if edges.size < 2:
            raise ValidationError("outcome has no spread to bin")
        masks = []
        for b in range(edges.size - 1):
            lo, hi = edges[b], edges[b + 1]
            last = b == edges.size - 2
            sel = (y >= lo) & ((y <= hi) if last else (y < hi))
            masks.append((f"1[{lo:.3g}<=Y{'<=' if last else '<'}{hi:.3g}]", sel))
    n = coding.n
    outcomes, rows, specs = [], [], []
    for tag, sel in masks:
        for tt in range(1, coding.n_treatments):
            outcomes.append((sel & (t == tt)).astype(np.float64))
            rows.append(f"{tag}{_indicator_label(recon[tt - 1])}")
            specs.append(recon[tt - 1])
    Y = np.column_stack(outcomes)
    coef, vcov = regress_hc0(Y, fs.fitted, w, fs.codes)
    cols = [f"P{k + 1}" for k in range(n)]
    restrictions = []
    for i, spec in enumerate(specs):
        for k in range(n):
            kind = ">=0" if spec[k] > 0 else "<=0" if spec[k] < 0 else "=0"
            restrictions.append((f"{rows[i]} on {cols[k]}", kind, _unit(coef.shape, ((i, k), 1.0)), True))
    # Sums across treatments of one P column whose combination weights cancel.
    # They vanish only if the bin probability is the same under every
    # treatment involved for the types that column moves, so they are shown
    # but kept out of the verdict.
    n_t1 = coding.n_treatments - 1
    for g in range(len(masks)):
        for k in range(n):
            col = recon[:, k]
            if np.any(col != 0) and col.sum() == 0 and np.count_nonzero(col) > 1:
                entries = [((g * n_t1 + i, k), 1.0) for i in range(n_t1) if col[i] != 0]
                label = " + ".join(f"{rows[g * n_t1 + i]} on {cols[k]}" for i in range(n_t1) if col[i] != 0)
                restrictions.append((label, "=0", _unit(coef.shape, *entries), False))
    notes = [f"dropped cells: {fs.dropped_cells}"] if fs.dropped_cells else []
    return _assemble("Outcome-bin test", rows, cols, coef, vcov, restrictions, alpha, int(y.size), notes)


def subsample_first_stage_test(
    data: Dataset,
    coding: TreatmentCoding,
    flag: str,
    fe_cell: bool = False,
    use_Z_directly: bool = False,
    alpha: float = ALPHA,
    value: bool = True,
) -> TestReport:
    """First stage of D on full-sample fitted values within a subsample.

    Rows with ``flags[flag] == value`` form the subsample. Proper weights for
    every type imply a coefficient matrix with non-negative diagonal and zero
    off-diagonal. With ``use_Z_directly`` (one instrument per indicator) D is
    regressed on Z itself, which needs each instrument to be matched to the
    indicator in the same position.
    """
    if flag not in data.flags:
        raise ValidationError(f"no flag column {flag!r}")
    fs = sample_projection(data, coding, fe_cell)
    n = coding.n
    sub = data.flags[flag][fs.keep] == value
    if sub.sum() < data.m + n + 10:
        raise ValidationError(f"subsample has {int(sub.sum())} rows, needs at least {data.m + n + 10}")
    d = data.treatment_indicators(coding)[fs.keep][sub]
    if use_Z_directly:
        if data.m != n:
            raise ShapeError("direct instrument regression needs one instrument per treatment indicator")
        X = data.z[fs.keep][sub]
        cols = [f"Z{k + 1}" for k in range(n)]
    else:
        X = fs.fitted[sub]
        cols = [f"P{k + 1}" for k in range(n)]
    codes = None
    if fe_cell:
        codes, _ = cell_codes(data.x_cell[fs.keep][sub])
    coef, vcov = regress_hc0(d, X, fs.weights[sub], codes)
    rows = [f"D{k + 1}" for k in range(n)]
    restrictions = []
    for k in range(n):
        for l in range(n):
            kind = ">=0" if k == l else "=0"
            restrictions.append((f"{rows[k]} on {cols[l]}", kind, _unit(coef.shape, ((k, l), 1.0)), True))
    label = f"{flag}={'1' if value else '0'}"
    return _assemble(f"Subsample first stage ({label})", rows, cols, coef, vcov, restrictions, alpha, int(sub.sum()))


def _poly_design(x, codes, w):
    sd = np.sqrt(np.average((x - np.average(x, weights=w)) ** 2, weights=w))
    xs = (x - np.average(x, weights=w)) / (sd if sd > 0 else 1.0)
    restricted = xs[:, None]
    full = np.column_stack([xs, xs**2, xs**3])
    if codes is None:
        one = np.ones((x.size, 1))
        return np.hstack([one, restricted]), np.hstack([one, full])
    return (
        _kernels.group_demean(restricted, codes, w),
        _kernels.group_demean(full, codes, w),
    )


def _rss(y, X, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    rank = np.linalg.matrix_rank(X * sw[:, None])
    return float(w @ (y - X @ coef) ** 2), int(rank)


def _reset(yk, xl, w, codes=None):
    if codes is not None:
        yk = _kernels.group_demean(yk[:, None], codes, w)[:, 0]
    X_r, X_u = _poly_design(xl, codes, w)
    rss_r, p_r = _rss(yk, X_r, w)
    rss_u, p_u = _rss(yk, X_u, w)
    n_eff = w.sum()
    tss = float(w @ (yk - np.average(yk, weights=w)) ** 2)
    q = p_u - p_r
    gain = rss_r - rss_u
    if q <= 0 or gain <= 1e-12 * max(tss, 1e-300):
        f_stat = 0.0
    elif rss_u <= 1e-14 * max(tss, 1e-300):
        f_stat = np.inf
    else:
        f_stat = (gain / q) / (rss_u / (n_eff - p_u))
    df2 = n_eff - p_u
    p_val = float(stats.f.sf(f_stat, q, df2)) if q > 0 and df2 > 0 and np.isfinite(f_stat) else (0.0 if f_stat == np.inf else 1.0)
    return {"f_stat": float(f_stat), "df1": int(q), "df2": float(df2), "p_value": p_val,
            "rss_restricted": rss_r, "rss_unrestricted": rss_u}


def binned_means(yk, xl, w, n_bins):
    """Weighted mean of yk within quantile bins of xl (distinct values if fewer)."""
    uniq = np.unique(xl)
    if uniq.size <= n_bins:
        bins = np.searchsorted(uniq, xl)
        n_b = uniq.size
    else:
        edges = np.quantile(xl, np.linspace(0, 1, n_bins + 1))
        bins = np.clip(np.searchsorted(edges, xl, side="right") - 1, 0, n_bins - 1)
        n_b = n_bins
    out = []
    for b in range(n_b):
        sel = bins == b
        if not sel.any():
            continue
        wt = w[sel]
        out.append({"x_mean": float(np.average(xl[sel], weights=wt)), "y_mean": float(np.average(yk[sel], weights=wt)),
                    "weight": float(wt.sum())})
    return out


def linearity_test(
    source,
    pair: tuple[int, int] = (1, 0),
    coding: TreatmentCoding | None = None,
    fe_cell: bool = False,
    bins: int = 20,
    alpha: float = ALPHA,
) -> dict:
    """RESET-style check that E[P_k | P_l] is affine, for ``pair = (k, l)``.

    P_k is regressed on a standardised P_l with and without its square and
    cube; F is zero when the powers add nothing. A :class:`Population` is
    evaluated on its support (one observation per support point, weighted
    by probability); a :class:`Dataset` uses first-stage fitted values,
    which repeat within instrument cells, so the F test overstates precision
    and serves as a descriptive diagnostic.
    """
    k, l = pair
    per_cell = {}
    if isinstance(source, Population):
        proj = population_projection(source)
        vals = (proj.values if fe_cell else proj.levels).reshape(-1, source.n)
        mass = proj.mass.ravel()
        keep = mass > 0
        vals, mass = vals[keep], mass[keep]
        w = mass / mass.sum() * keep.sum()
        codes = np.repeat(np.arange(len(proj.cells)), proj.mass.shape[1])[keep] if fe_cell else None
        labels = proj.cells
    elif isinstance(source, Dataset):
        if coding is None:
            raise ValidationError("a coding is required for sample data")
        fs = sample_projection(source, coding, fe_cell)
        vals, w, codes = fs.fitted, fs.weights, fs.codes
        labels = cell_codes(source.x_cell[fs.keep])[1] if fe_cell else None
    else:
        raise TypeError(f"cannot test {type(source).__name__}")
    if not (0 <= k < vals.shape[1] and 0 <= l < vals.shape[1]) or k == l:
        raise ValidationError(f"bad pair {pair}")
    yk, xl = vals[:, k], vals[:, l]
    out = _reset(yk, xl, w, codes)
    out["pair"] = [k, l]
    out["reject"] = out["p_value"] < alpha
    out["binned_means"] = binned_means(yk, xl, w, bins)
    if codes is not None:
        for ci, lab in enumerate(labels):
            sel = codes == ci
            if np.unique(xl[sel]).size >= 3:
                per_cell[str(lab)] = _reset(yk[sel], xl[sel], w[sel])
        out["per_cell"] = per_cell
    return _jsonable(out)


def _cell_ratio_matrices(p_dd, codes, w, n_cells):
    wsum = w.sum()
    var = p_dd.T @ (w[:, None] * p_dd) / wsum
    out = np.empty((n_cells, var.shape[0], var.shape[0]))
    for c in range(n_cells):
        sel = codes == c
        pc = p_dd[sel]
        vc = pc.T @ (w[sel][:, None] * pc) / w[sel].sum()
        out[c] = np.linalg.solve(var, vc)
    return out


def _demeaned_fit(z, d, codes, w):
    zz = _kernels.group_demean(z, codes, w)
    dd = _kernels.group_demean(d, codes, w)
    sw = np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(zz * sw, dd * sw, rcond=None)
    return zz @ coef


def covary_similarly_test(
    data: Dataset,
    coding: TreatmentCoding,
    boot: int = DEFAULT_BOOT,
    seed: int = 0,
    alpha: float = ALPHA,
) -> TestReport:
    """Bootstrap test that Var(P | X = x) is proportional to the pooled Var(P).

    Per cell the matrix Var(P)^-1 Var(P | X = x) must be a multiple of the
    identity: zero off-diagonals and equal diagonal entries. Standard errors
    come from a bootstrap that resamples rows within cells and refits the
    first stage each time. Rows of the coefficient table are cells.
    """
    if data.x_cell is None:
        raise ValidationError("the data has no cell column")
    fs = sample_projection(data, coding, fe_cell=True)
    codes, labels = fs.codes, cell_codes(data.x_cell[fs.keep])[1]
    n_cells, n = len(labels), coding.n
    z = data.z[fs.keep]
    d = data.treatment_indicators(coding)[fs.keep]
    w = fs.weights
    est = _cell_ratio_matrices(fs.fitted, codes, w, n_cells)

    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(codes == c) for c in range(n_cells)]
    draws = np.empty((boot,) + est.shape)
    for b in range(boot):
        counts = np.zeros(codes.size)
        for idx in members:
            counts[idx] = rng.multinomial(idx.size, np.full(idx.size, 1.0 / idx.size))
        wb = w * counts
        try:
            p_b = _demeaned_fit(z, d, codes, wb)
            draws[b] = _cell_ratio_matrices(p_b, codes, wb, n_cells)
        except np.linalg.LinAlgError:
            draws[b] = np.nan
    draws = draws[~np.isnan(draws).any(axis=(1, 2, 3))]

    entries, labels_out = [], []
    for c in range(n_cells):
        for k in range(n):
            for l in range(n):
                if k != l:
                    entries.append(((c, k, l), None))
                    labels_out.append(f"cell {labels[c]}: ratio[{k + 1},{l + 1}]")
            if k > 0:
                entries.append(((c, k, k), (c, 0, 0)))
                labels_out.append(f"cell {labels[c]}: ratio[{k + 1},{k + 1}] - ratio[1,1]")
    stat_est = np.array([est[a] - (est[b] if b else 0.0) for a, b in entries])
    stat_boot = np.array([[dr[a] - (dr[b] if b else 0.0) for a, b in entries] for dr in draws])
    ses = stat_boot.std(axis=0, ddof=1)
    hyps = [Hypothesis(lab, "=0", float(e), float(s), _p_value("=0", e, s)) for lab, e, s in zip(labels_out, stat_est, ses)]
    overall = min(1.0, len(hyps) * min(h.p_value for h in hyps)) if hyps else 1.0
    coef = est.reshape(n_cells, n * n)
    se = draws.std(axis=0, ddof=1).reshape(n_cells, n * n)
    cols = [f"r{k + 1}{l + 1}" for k in range(n) for l in range(n)]
    contamination = est / np.einsum("cll->cl", est)[:, None, :]
    extra = {
        "contamination": {str(lab): contamination[c] for c, lab in enumerate(labels)},
        "bootstrap_replicates": int(draws.shape[0]),
    }
    return TestReport(
        "Proportional variance test", [str(x) for x in labels], cols, coef, se, hyps, None, overall, alpha,
        int(codes.size), [], extra,
    )
