"""Demographic accounting: matrix balancing, stock scaling, target weights.

All functions are pure; IPF works on a private copy of its seed matrix.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .domain import StockSeries, StockTable
from .errors import ConvergenceError, GapError, StructuralError

log = logging.getLogger(__name__)

IPF_TOL = 1e-10
IPF_MAX_ITER = 5000
WEIGHT_BOUNDS = (0.5, 2.0)


@dataclass(frozen=True)
class MarginalTargets:
    row_targets: np.ndarray
    col_targets: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.row_targets, dtype=float)
        c = np.asarray(self.col_targets, dtype=float)
        if np.any(r < 0) or np.any(c < 0):
            raise StructuralError("marginal targets must be non-negative")
        object.__setattr__(self, "row_targets", r)
        object.__setattr__(self, "col_targets", c)

    def total_mismatch(self):
        total = max(self.row_targets.sum(), self.col_targets.sum(), np.finfo(float).tiny)
        return abs(self.row_targets.sum() - self.col_targets.sum()) / total


def _residual(x, r, c):
    scale = max(r.max(initial=0.0), c.max(initial=0.0), np.finfo(float).tiny)
    return max(np.abs(x.sum(axis=1) - r).max(initial=0.0), np.abs(x.sum(axis=0) - c).max(initial=0.0)) / scale


def ipf(M, targets, tol=IPF_TOL, max_iter=IPF_MAX_ITER):
    """Iterative proportional fitting of a non-negative matrix to row/column sums.

    Rows and columns are rescaled alternately until the largest marginal
    residual, relative to the largest target, drops below ``tol``.
    """
    x = np.array(M, dtype=float)
    r, c = targets.row_targets, targets.col_targets
    if x.shape != (r.size, c.size):
        raise StructuralError(f"matrix shape {x.shape} does not match targets ({r.size}, {c.size})")
    if np.any(x < 0):
        raise StructuralError("IPF seed matrix must be non-negative")
    rows, cols = x.sum(axis=1), x.sum(axis=0)
    if np.any((r > 0) & (rows == 0)) or np.any((c > 0) & (cols == 0)):
        raise StructuralError("a positive marginal target has no support in the seed matrix")
    if targets.total_mismatch() > 1e-6:
        raise ConvergenceError("row and column targets have different totals", targets.total_mismatch())
    residual = _residual(x, r, c)
    for _ in range(max_iter):
        if residual < tol:
            return x
        rows = x.sum(axis=1)
        x *= np.divide(r, rows, out=np.zeros_like(r), where=rows > 0)[:, None]
        cols = x.sum(axis=0)
        x *= np.divide(c, cols, out=np.zeros_like(c), where=cols > 0)[None, :]
        residual = _residual(x, r, c)
    if residual < tol:
        return x
    raise ConvergenceError(f"IPF did not converge in {max_iter} iterations", residual)


def begin_of_year_targets(S_mid, births, gamma):
    """Row targets ``sum_j S_ij / sqrt(1 - g_j) - B_i / (2 sqrt(1 - g_i))``.

    The row index of the birth term follows the published formula literally.
    """
    s = S_mid.values if hasattr(S_mid, "values") else np.asarray(S_mid, dtype=float)
    root = np.sqrt(1.0 - np.asarray(gamma, dtype=float))
    return (s / root[None, :]).sum(axis=1) - np.asarray(births, dtype=float) / (2.0 * root)


def begin_of_year_stocks(S_mid, rates, year, jan_population, tol=IPF_TOL):
    births, gamma = rates.at(year)
    rows = begin_of_year_targets(S_mid, births, gamma)
    if np.any(rows < 0):
        raise ConvergenceError("negative row target for beginning-of-year scaling", float(-rows.min()))
    out = ipf(S_mid.values, MarginalTargets(rows, np.asarray(jan_population, dtype=float)), tol)
    return StockTable(out, year)


@dataclass(frozen=True)
class StockUncertainty:
    """Per-cell absolute error ``sigma`` and relative error ``relative``.

    ``filled`` flags cells where the stock is zero and ``relative`` holds the
    year's median instead of a ratio.
    """

    year: int
    sigma: np.ndarray
    relative: np.ndarray
    filled: np.ndarray
    n_alternatives: int


def _interval_terms(S1, S2, rates):
    """Births added to and deaths removed from the stock between two tables."""
    n = S1.n
    births_total = np.zeros(n)
    birth_deaths = np.zeros(n)
    survival = np.ones(n)
    for year in range(S1.year, S2.year):
        births, _ = rates.at(year)
        later = np.ones(n)
        for after in range(year + 1, S2.year):
            later *= 1.0 - rates.at(after)[1]
        births_total += births
        birth_deaths += births * (1.0 - later)
        survival *= 1.0 - rates.at(year)[1]
    b_term = np.diag(births_total)
    d_term = S1.values * (1.0 - survival)[None, :] + np.diag(birth_deaths)
    return b_term, d_term


def _marginals(x):
    return x.sum(axis=1), x.sum(axis=0)


def pair_alternatives(S1, S2, rates, tol=IPF_TOL):
    """Midpoint and endpoint re-estimates of both tables of one pair.

    Returns ``(alternatives_for_S1, alternatives_for_S2)``, two arrays each.
    """
    if S2.year <= S1.year:
        raise StructuralError("second stock table must be later than the first")
    b_term, d_term = _interval_terms(S1, S2, rates)
    x1 = S1.values + b_term
    x2 = S2.values + d_term
    (r1, c1), (r2, c2) = _marginals(x1), _marginals(x2)
    mid = MarginalTargets(0.5 * (r1 + r2), 0.5 * (c1 + c2))
    mid1 = np.maximum(ipf(x1, mid, tol) - b_term, 0.0)
    mid2 = np.maximum(ipf(x2, mid, tol) - d_term, 0.0)

    y1 = np.maximum(S1.values + b_term - d_term, 0.0)
    y2 = np.maximum(S2.values - b_term + d_term, 0.0)
    end2 = ipf(y1, MarginalTargets(*_marginals(S2.values)), tol)
    end1 = ipf(y2, MarginalTargets(*_marginals(S1.values)), tol)
    return [mid1, end1], [mid2, end2]


def stock_uncertainty(tables, rates, tol=IPF_TOL):
    """Uncertainty of each stock table from demographic re-estimates.

    ``tables`` is a year-ordered sequence of at least two stock tables. Every
    table gets two alternatives per neighbour: four in the interior, two at
    the boundaries. ``sigma`` is the mean absolute deviation from the table.
    """
    tables = list(tables)
    if len(tables) < 2:
        raise StructuralError("need at least two stock tables")
    alts = [[] for _ in tables]
    for n, (a, b) in enumerate(zip(tables[:-1], tables[1:])):
        first, second = pair_alternatives(a, b, rates, tol)
        alts[n].extend(first)
        alts[n + 1].extend(second)
    out = []
    for table, alt in zip(tables, alts):
        sigma = np.mean([np.abs(x - table.values) for x in alt], axis=0)
        positive = table.values > 0
        rel = np.full(sigma.shape, np.nan)
        rel[positive] = sigma[positive] / table.values[positive]
        fill = float(np.median(rel[positive])) if positive.any() else 0.0
        rel[~positive] = fill
        out.append(StockUncertainty(table.year, sigma, rel, ~positive, len(alt)))
    return out


def weights_from_relative_error(relative):
    """``clip(exp(-z), 0.5, 2)`` with ``z`` the z-score of the relative errors.

    Uses the population standard deviation; constant input gives weight 1.
    Non-finite entries stay ``nan``.
    """
    rho = np.asarray(relative, dtype=float)
    ok = np.isfinite(rho)
    out = np.full(rho.shape, np.nan)
    if not ok.any():
        return out
    std = rho[ok].std()
    # rounding in the mean leaves a tiny non-zero spread for constant input
    if np.ptp(rho[ok]) == 0 or not std > 0:
        out[ok] = 1.0
        return out
    z = (rho[ok] - rho[ok].mean()) / std
    out[ok] = np.clip(np.exp(-z), *WEIGHT_BOUNDS)
    return out


def flow_weights(values, se, corridors):
    """Weights for flow observations from optional standard errors.

    Points without a standard error take their corridor's median relative
    error; corridors without any standard error get weight exactly 1.
    ``corridors`` labels each observation (e.g. ``j * N + k``).
    """
    values = np.asarray(values, dtype=float)
    se = np.asarray(se, dtype=float)
    corridors = np.asarray(corridors)
    rho = np.full(values.shape, np.nan)
    known = np.isfinite(se) & (values != 0)
    rho[known] = se[known] / np.abs(values[known])
    bare = np.zeros(values.shape, dtype=bool)
    for key in np.unique(corridors):
        sel = corridors == key
        have = sel & known
        if not have.any():
            bare |= sel
            continue
        rho[sel & ~known] = np.median(rho[have])
    w = weights_from_relative_error(np.where(bare, np.nan, rho))
    w[bare] = 1.0
    return w


def difference_relative_error(sigma1, sigma2, diff):
    """Relative error of a stock difference with independent endpoint errors.

    Zero differences take the median of the defined ratios.
    """
    sig = np.sqrt(np.asarray(sigma1, dtype=float) ** 2 + np.asarray(sigma2, dtype=float) ** 2)
    d = np.abs(np.asarray(diff, dtype=float))
    rho = np.full(sig.shape, np.nan)
    rho[d > 0] = sig[d > 0] / d[d > 0]
    fill = np.median(rho[d > 0]) if (d > 0).any() else 0.0
    rho[~(d > 0)] = fill
    return rho


def native_born(P, S):
    """Set ``S_ii = P_i - sum_{j != i} S_ji``, clamped at zero with a warning."""
    s = np.array(S.values if hasattr(S, "values") else S, dtype=float)
    p = np.asarray(P, dtype=float)
    foreign = s.sum(axis=0) - np.diag(s)
    native = p - foreign
    if np.any(native < 0):
        bad = np.flatnonzero(native < 0).tolist()
        warnings.warn(f"foreign-born stock exceeds population in countries {bad}; native stock set to 0",
                      RuntimeWarning, stacklevel=2)
        native = np.maximum(native, 0.0)
    np.fill_diagonal(s, native)
    return StockTable(s, getattr(S, "year", 0))


def _corr(a, b):
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 3:
        return None
    a, b = a[ok], b[ok]
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def similarity_weights(target, donors, distances):
    """Donor weights ``max(corr, 0) * softmax(-distance)``.

    An undefined correlation (fewer than three shared points or a constant
    series) does not discount the donor.
    """
    d = np.asarray(distances, dtype=float)
    prox = np.exp(-(d - d.min()))
    prox /= prox.sum()
    out = np.zeros(len(donors))
    for n, donor in enumerate(donors):
        c = _corr(target, donor)
        out[n] = prox[n] * (1.0 if c is None else max(c, 0.0))
    return out


def interpolate_stocks(series, distances):
    """Fill gaps in every ``S[i, j]`` series from similar complete series.

    Donors for ``(i, j)`` are the fully observed series ``(i, k)``; their
    annual growth rates are averaged with :func:`similarity_weights` and
    applied from the observed anchors forwards and backwards. Series with no
    observation at all become zero. Without usable donors the nearest
    observed value is carried flat.
    """
    v = np.array(series.values, dtype=float)
    obs = np.array(series.observed, dtype=bool)
    n_years, n, _ = v.shape
    d = np.asarray(distances, dtype=float)
    complete = obs.all(axis=0)
    out = np.where(obs, v, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = v[1:] / v[:-1] - 1.0
    growth[~np.isfinite(growth)] = np.nan
    for i in range(n):
        for j in range(n):
            seen = obs[:, i, j]
            if seen.all():
                continue
            if not seen.any():
                out[:, i, j] = 0.0
                continue
            donors = [k for k in range(n) if k != j and complete[i, k]]
            g = np.full(n_years - 1, np.nan)
            if donors:
                w = similarity_weights(out[:, i, j], [v[:, i, k] for k in donors], d[j, donors])
                gk = growth[:, i, donors]
                use = np.isfinite(gk) & (w[None, :] > 0)
                num = np.where(use, gk * w[None, :], 0.0).sum(axis=1)
                den = np.where(use, w[None, :], 0.0).sum(axis=1)
                g = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
            col = out[:, i, j]
            first = int(np.flatnonzero(seen)[0])
            for t in range(first + 1, n_years):
                if not seen[t]:
                    col[t] = col[t - 1] * (1.0 + g[t - 1]) if np.isfinite(g[t - 1]) else col[t - 1]
            for t in range(first - 1, -1, -1):
                col[t] = col[t + 1] / (1.0 + g[t]) if np.isfinite(g[t]) and g[t] > -1 else col[t + 1]
            out[:, i, j] = np.maximum(col, 0.0)
    return StockSeries(series.years, out, obs, series.weights)


def unobserved_series(series):
    """Cells never observed in any year; their flows are forced to zero."""
    return ~np.asarray(series.observed, dtype=bool).any(axis=0)


def wpp_net_migration(P, birth_rate, death_rate):
    """Residual net migration ``P(t+1) - P(t) - (beta(t) - gamma(t)) P(t)``.

    Inputs have shape ``(years, N)``; the result has one row fewer.
    """
    p = np.asarray(P, dtype=float)
    beta = np.asarray(birth_rate, dtype=float)
    gamma = np.asarray(death_rate, dtype=float)
    if p.shape[0] < 2:
        raise GapError("need at least two consecutive population values")
    mu = p[1:] - p[:-1] - (beta[:-1] - gamma[:-1]) * p[:-1]
    gaps = ~np.isfinite(mu)
    if gaps.any():
        t, c = np.argwhere(gaps)[0]
        raise GapError(f"missing population or rates for year offset {t} / {t + 1}, country {c}")
    return mu
