"""Classical stock-based flow estimators and correlation scoring.

Stock differencing turns the change of a bilateral stock table into flows,
either dropping negative changes or reading them as return moves. The
demographic-accounting estimator first removes births and deaths, balances
the tables, and then moves the fewest people needed to explain the residual
change of each birth cohort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accounting import MarginalTargets, _interval_terms, ipf
from .domain import FlowTensor
from .errors import StructuralError

MEASURES = ("od", "birth_destination", "inflow", "outflow", "net")


@dataclass(frozen=True)
class StockDiffFlows:
    """Flows implied by a stock difference.

    ``birth_destination[i, k]``: arrivals of ``i``-born people in ``k``.
    ``od[j, k]``: moves from ``j`` to ``k`` with the birth country as origin
    of an arrival and as destination of a return.
    """

    birth_destination: np.ndarray
    od: np.ndarray

    def measures(self):
        return {
            "od": self.od,
            "birth_destination": self.birth_destination,
            "inflow": self.od.sum(axis=0),
            "outflow": self.od.sum(axis=1),
            "net": self.od.sum(axis=0) - self.od.sum(axis=1),
        }


def _diff(S1, S2):
    a, b = np.asarray(getattr(S1, "values", S1), dtype=float), np.asarray(getattr(S2, "values", S2), dtype=float)
    if a.shape != b.shape:
        raise StructuralError("stock tables must cover the same countries")
    d = b - a
    np.fill_diagonal(d, 0.0)
    return d


def stock_diff_drop(S1, S2):
    """Positive stock changes as arrivals; negative changes are ignored."""
    arrivals = np.maximum(_diff(S1, S2), 0.0)
    return StockDiffFlows(arrivals, arrivals.copy())


def stock_diff_reverse(S1, S2):
    """Positive changes as arrivals, negative changes as returns to the birth country."""
    d = _diff(S1, S2)
    arrivals = np.maximum(d, 0.0)
    returns = np.maximum(-d, 0.0)
    bd = arrivals + np.diag(returns.sum(axis=1))
    return StockDiffFlows(bd, arrivals + returns.T)


def pearson(a, b):
    """Pearson R, or nan when fewer than 3 points or a constant input."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if a.size < 3:
        return float("nan")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def _route(deficit, i):
    """Minimum-movement transport for one birth cohort.

    ``deficit[j] > 0`` means the cohort grew in ``j``. Moves touching the
    birth country ``i`` are placed first, the rest proportionally.
    """
    n = deficit.size
    need = np.maximum(deficit, 0.0)
    supply = np.maximum(-deficit, 0.0)
    moves = np.zeros((n, n))
    if supply[i] > 0 and need.sum() > 0:
        share = supply[i] * need / need.sum()
        moves[i] += share
        need -= share
        supply[i] = 0.0
    elif need[i] > 0 and supply.sum() > 0:
        share = need[i] * supply / supply.sum()
        moves[:, i] += share
        supply -= share
        need[i] = 0.0
    total = need.sum()
    if total > 0 and supply.sum() > 0:
        moves += np.outer(supply, need) / total
    np.fill_diagonal(moves, 0.0)
    return moves


@dataclass(frozen=True)
class AccountingFlows:
    flows: FlowTensor
    projected: np.ndarray
    balanced: np.ndarray

    @property
    def label(self):
        return "demographic accounting (minimum movement, birth corridors first)"


def demographic_accounting_flows(S1, S2, rates, tol=1e-10):
    """Flows over ``[S1.year, S2.year)`` explaining the demographically adjusted change.

    ``S1`` is projected forward with births and deaths; ``S2`` is balanced by
    IPF to the projection's birth-country totals with its own residence
    profile rescaled to the same total. The returned tensor moves each cohort
    from the residences where it shrank to those where it grew.
    """
    b_term, d_term = _interval_terms(S1, S2, rates)
    projected = S1.values + b_term - d_term
    rows = projected.sum(axis=1)
    cols = S2.values.sum(axis=0)
    cols = cols * (rows.sum() / cols.sum()) if cols.sum() > 0 else cols
    balanced = ipf(S2.values, MarginalTargets(rows, cols), tol)
    n = S1.n
    T = np.zeros((n, n, n))
    for i in range(n):
        T[i] = _route(balanced[i] - projected[i], i)
    return AccountingFlows(FlowTensor(T, S1.year), projected, balanced)


def tensor_measures(T):
    T = np.asarray(getattr(T, "values", T), dtype=float)
    od = T.sum(axis=0)
    return {
        "od": od,
        "birth_destination": T.sum(axis=1),
        "inflow": od.sum(axis=0),
        "outflow": od.sum(axis=1),
        "net": od.sum(axis=0) - od.sum(axis=1),
    }


def aggregate_windows(annual, window):
    """Sum consecutive blocks of ``window`` years along the first axis; a partial tail is dropped."""
    a = np.asarray(annual, dtype=float)
    full = a.shape[0] // window
    return [a[w * window:(w + 1) * window].sum(axis=0) for w in range(full)]


@dataclass(frozen=True)
class ComparisonReport:
    method: str
    values: dict

    def row(self):
        return [self.method] + [self.values.get(m, float("nan")) for m in MEASURES]


def _flatten(measure, key):
    m = np.asarray(measure, dtype=float)
    if key in ("od", "birth_destination"):
        m = m[~np.eye(m.shape[0], dtype=bool)]
    return m.ravel()


def comparison_metrics(estimates, reference, method="estimate"):
    """Pearson R per measure between matching lists of measure dicts.

    Each list entry covers one aggregation window; measures missing on either
    side, or with fewer than three points, are reported as ``nan``.
    """
    if len(estimates) != len(reference):
        raise StructuralError("estimates and reference must cover the same windows")
    values = {}
    for key in MEASURES:
        xs, ys = [], []
        for est, ref in zip(estimates, reference):
            if est.get(key) is None or ref.get(key) is None:
                continue
            xs.append(_flatten(est[key], key))
            ys.append(_flatten(ref[key], key))
        values[key] = pearson(np.concatenate(xs), np.concatenate(ys)) if xs else float("nan")
    return ComparisonReport(method, values)
