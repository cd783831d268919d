"""Core containers and the mechanistic bookkeeping of migrant stocks.

Conventions used throughout the package:

* ``S[i, j]`` is the number of people born in ``i`` living in ``j``.
* ``T[i, j, k]`` is the flow of ``i``-born people from ``j`` to ``k`` during a
  calendar year. Self-corridor entries ``T[i, j, j]`` are always zero.
* Stocks are beginning-of-year values. A flow year ``t`` moves the stock table
  of ``t`` to the table of ``t + 1``: deaths act on the start-of-year stock,
  births and net migration are added in the same step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, StructuralError


def _frozen(array, dtype=float):
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CountryRegistry:
    codes: tuple
    names: tuple = ()

    def __post_init__(self):
        codes = tuple(str(c) for c in self.codes)
        if len(set(codes)) != len(codes):
            raise StructuralError("country codes must be unique")
        names = tuple(self.names) if self.names else codes
        if len(names) != len(codes):
            raise StructuralError("names must align with codes")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.codes)

    def index(self, code):
        try:
            return self._lookup[code]
        except KeyError:
            raise StructuralError(f"unknown country code {code!r}") from None

    @cached_property
    def _lookup(self):
        return {c: n for n, c in enumerate(self.codes)}


@dataclass(frozen=True)
class TimeAxis:
    start_year: int
    end_year: int

    def __post_init__(self):
        if self.start_year > self.end_year:
            raise StructuralError("start_year must not exceed end_year")

    @property
    def years(self):
        return list(range(self.start_year, self.end_year + 1))

    def __len__(self):
        return self.end_year - self.start_year + 1

    def offset(self, year):
        if not self.start_year <= year <= self.end_year:
            raise StructuralError(f"year {year} outside {self.start_year}-{self.end_year}")
        return year - self.start_year


@dataclass(frozen=True)
class StockTable:
    values: np.ndarray
    year: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise StructuralError(f"stock table must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("stock table entries must be finite and non-negative")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class StockSeries:
    """Stock tables over years with an observation mask and per-cell weights.

    ``values`` has shape ``(years, N, N)``; unobserved cells hold ``nan``.
    """

    years: tuple
    values: np.ndarray
    observed: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        m = np.asarray(self.observed, dtype=bool)
        if v.shape != m.shape or v.ndim != 3 or len(self.years) != v.shape[0]:
            raise StructuralError("values, mask and years must align")
        w = np.ones_like(v) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != v.shape:
            raise StructuralError("weights must align with values")
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "observed", _frozen(m, bool))
        object.__setattr__(self, "weights", _frozen(w))

    def table(self, year):
        t = self.years.index(year)
        return StockTable(np.nan_to_num(self.values[t]), year)


@dataclass(frozen=True)
class FlowTensor:
    values: np.ndarray
    year: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise StructuralError(f"flow tensor must be N x N x N, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("flow tensor entries must be finite and non-negative")
        idx = np.arange(v.shape[0])
        v[:, idx, idx] = 0.0
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class OriginDestinationMatrix:
    values: np.ndarray
    year: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise StructuralError("origin-destination matrix must be square")
        if np.any(v < 0):
            raise DomainError("flows must be non-negative")
        np.fill_diagonal(v, 0.0)
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class NetMigrationVector:
    values: np.ndarray
    year: int

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=float)))


@dataclass(frozen=True)
class DemographicRates:
    """Per-country demographic series, arrays of shape ``(years, N)``.

    ``births`` are counts, ``birth_rate`` and ``death_rate`` crude per-capita
    rates, ``population`` totals. Rows follow ``axis`` years.
    """

    axis: TimeAxis
    births: np.ndarray
    death_rate: np.ndarray
    population: np.ndarray | None = None
    birth_rate: np.ndarray | None = None

    def __post_init__(self):
        shape = (len(self.axis), np.shape(self.births)[-1])
        for name in ("births", "death_rate", "population", "birth_rate"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.shape != shape:
                raise StructuralError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, _frozen(arr))
        if np.any(self.death_rate >= 1) or np.any(self.death_rate < 0):
            raise DomainError("death rates must lie in [0, 1)")
        if self.population is not None and np.any(self.population <= 0):
            raise DomainError("population must be positive")

    @property
    def n(self):
        return self.births.shape[1]

    def at(self, year):
        t = self.axis.offset(year)
        return self.births[t], self.death_rate[t]


@dataclass(frozen=True)
class TargetDataset:
    """Weighted observations driving the loss.

    ``stock_diffs`` rows: ``(year_start, year_end, birth, residence, value, weight)``.
    ``flows`` rows: ``(year, origin, destination, value, weight, se)`` with
    ``se = nan`` when no standard error is known.
    ``net_migration`` rows: ``(year, country, value, weight)``.
    ``test_corridors``: boolean ``(N, N)`` mask of withheld flow corridors.
    Registry indices are integers; years are calendar years.
    """

    stock_diffs: np.ndarray = field(default_factory=lambda: np.empty((0, 6)))
    flows: np.ndarray = field(default_factory=lambda: np.empty((0, 6)))
    net_migration: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))
    test_corridors: np.ndarray | None = None

    def __post_init__(self):
        for name, width, wcol in (("stock_diffs", 6, 5), ("flows", 6, 4), ("net_migration", 4, 3)):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, width)
            w = arr[:, wcol]
            if np.any(w < 0.5 - 1e-12) or np.any(w > 2 + 1e-12):
                raise DomainError(f"{name} weights must lie in [0.5, 2]")
            object.__setattr__(self, name, _frozen(arr))
        if self.test_corridors is not None:
            object.__setattr__(self, "test_corridors", _frozen(self.test_corridors, bool))

    def validate(self, n_countries, years):
        years = set(years)
        for name, cols, ycols in (
            ("stock_diffs", (2, 3), (0, 1)),
            ("flows", (1, 2), (0,)),
            ("net_migration", (1,), (0,)),
        ):
            arr = getattr(self, name)
            for c in cols:
                if arr.size and (arr[:, c].min() < 0 or arr[:, c].max() >= n_countries):
                    raise StructuralError(f"{name}: country index out of range")
            for c in ycols:
                bad = set(arr[:, c].astype(int).tolist()) - years
                if bad:
                    raise StructuralError(f"{name}: years {sorted(bad)} not covered")

    def training_subset(self):
        """Targets with flows on withheld corridors removed."""
        if self.test_corridors is None or not self.flows.size:
            return self
        j = self.flows[:, 1].astype(int)
        k = self.flows[:, 2].astype(int)
        keep = ~self.test_corridors[j, k]
        return TargetDataset(self.stock_diffs, self.flows[keep], self.net_migration, self.test_corridors)

    @property
    def size(self):
        return len(self.stock_diffs) + len(self.flows) + len(self.net_migration)


def _values(x):
    return x.values if hasattr(x, "values") else np.asarray(x, dtype=float)


def flows_by_origin(T):
    """Total origin-destination flows ``F[j, k] = sum_i T[i, j, k]``."""
    F = _values(T).sum(axis=0)
    return OriginDestinationMatrix(F, getattr(T, "year", 0))


def net_migration(F):
    """Arrivals minus departures, ``mu[j] = sum_k F[k, j] - F[j, k]``."""
    v = _values(F)
    return NetMigrationVector(v.sum(axis=0) - v.sum(axis=1), getattr(F, "year", 0))


@dataclass
class ClampCounter:
    """Mutable tally of cells clamped at zero; owned by a single caller."""

    cells: int = 0

    def add(self, n):
        self.cells += int(n)


def stock_step(S, T, rates, year, clamps=None):
    """Advance a beginning-of-year stock table by one year.

    ``S'[i, j] = S[i, j] + delta_ij B_j - gamma_j S[i, j]
    + sum_k (T[i, k, j] - T[i, j, k])``, clamped at zero.
    """
    s = _values(S)
    t = _values(T)
    n = s.shape[0]
    if t.shape != (n, n, n):
        raise StructuralError(f"flow tensor shape {t.shape} does not match stock table {s.shape}")
    births, gamma = rates.at(year)
    if births.shape[0] != n:
        raise StructuralError("demographic rates do not match the registry size")
    out = s * (1.0 - gamma)[None, :] + t.sum(axis=1) - t.sum(axis=2)
    out[np.arange(n), np.arange(n)] += births
    negative = out < 0
    if negative.any():
        if clamps is not None:
            clamps.add(negative.sum())
        out[negative] = 0.0
    return StockTable(out, year + 1)
