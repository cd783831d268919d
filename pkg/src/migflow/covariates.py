"""Covariate tables, gap filling, and assembly of per-edge input vectors.

An edge ``(i, j, k)`` connects birth country ``i`` (B), origin ``j`` (O) and
destination ``k`` (D). Each covariate contributes one component per indexed
slot, e.g. population at B, O and D, or trade along OD and DO. The canonical
slot order is fixed by :data:`CANONICAL_SLOTS` and versioned by
:data:`LAYOUT_VERSION`; covariates absent from a panel are skipped, and the
resulting layout is identified by :meth:`EdgeDesign.layout_hash`.

Migrant stocks always occupy the last two slots because they are the only
components that change during a rollout.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, IngestionError, StructuralError
from .transform import Standardizer, fit_lambda, fit_standardizer, psi, psi_prime

log = logging.getLogger(__name__)

LAYOUT_VERSION = "1"

COUNTRY = "country"
PAIR = "pair"

# name -> (arity, binary, power-transformed)
COVARIATES = {
    "population": (COUNTRY, False, True),
    "life_expectancy": (COUNTRY, False, True),
    "birth_rate": (COUNTRY, False, True),
    "death_rate": (COUNTRY, False, True),
    "gdp_per_capita": (COUNTRY, False, True),
    "gdp_growth": (COUNTRY, False, True),
    "trade": (PAIR, False, True),
    "distance": (PAIR, False, True),
    "religious_similarity": (PAIR, False, False),
    "linguistic_similarity": (PAIR, False, False),
    "conflict_deaths": (COUNTRY, False, True),
    "refugee_stock": (PAIR, False, True),
    "refugee_change": (PAIR, False, True),
    "eu": (COUNTRY, True, False),
    "colony": (PAIR, True, False),
}

CANONICAL_SLOTS = (
    ("population", "B"), ("population", "O"), ("population", "D"),
    ("life_expectancy", "B"), ("life_expectancy", "O"), ("life_expectancy", "D"),
    ("birth_rate", "O"), ("birth_rate", "D"),
    ("death_rate", "O"), ("death_rate", "D"),
    ("gdp_per_capita", "B"), ("gdp_per_capita", "O"), ("gdp_per_capita", "D"),
    ("gdp_growth", "B"), ("gdp_growth", "O"), ("gdp_growth", "D"),
    ("trade", "OD"), ("trade", "DO"),
    ("distance", "OD"),
    ("religious_similarity", "BD"), ("religious_similarity", "OD"),
    ("linguistic_similarity", "BD"), ("linguistic_similarity", "OD"),
    ("conflict_deaths", "O"), ("conflict_deaths", "D"),
    ("refugee_stock", "BO"), ("refugee_stock", "BD"),
    ("refugee_change", "BO"), ("refugee_change", "BD"),
    ("eu", "B"), ("eu", "O"), ("eu", "D"),
    ("colony", "BD"), ("colony", "OD"),
    ("native_origin", "BO"), ("native_destination", "BD"),
    ("migrant_stock", "BO"), ("migrant_stock", "BD"),
)

STOCK_SLOTS = (("migrant_stock", "BO"), ("migrant_stock", "BD"))
KRONECKER = {"native_origin": "BO", "native_destination": "BD"}


# --- gap filling -----------------------------------------------------------

def gdp_growth(series):
    """Annual % growth ``100 * (GDP(t) / GDP(t-1) - 1)``; first entry is nan."""
    x = np.asarray(series, dtype=float)
    prev, cur = x[:-1], x[1:]
    known = np.isfinite(prev) & np.isfinite(cur)
    if np.any(prev[known] <= 0):
        raise DomainError("GDP growth needs positive values in the denominator")
    out = np.full(x.shape, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[1:] = 100.0 * (cur / prev - 1.0)
    return out


def deflate(nominal, deflator):
    deflator = np.asarray(deflator, dtype=float)
    if np.any(deflator <= 0):
        raise DomainError("deflator must be positive")
    return np.asarray(nominal, dtype=float) / deflator


def extrapolate_by_growth(series, growth, anchor_index, direction="both"):
    """Fill ``nan`` entries of ``series`` from ``anchor_index`` using % growth.

    Forward: ``v(t+1) = v(t) * (1 + g(t+1)/100)``; backward:
    ``v(t-1) = v(t) / (1 + g(t)/100)``. Only missing entries are written;
    extrapolation stops at the first missing growth value.
    """
    v = np.array(series, dtype=float)
    g = np.asarray(growth, dtype=float)
    if not np.isfinite(v[anchor_index]):
        raise DomainError("anchor value must be known")
    if direction in ("forward", "both"):
        for t in range(anchor_index + 1, v.size):
            if np.isfinite(v[t]):
                break
            if not np.isfinite(g[t]):
                break
            if g[t] <= -100:
                raise DomainError("growth of -100% or less cannot be extrapolated")
            v[t] = v[t - 1] * (1.0 + g[t] / 100.0)
    if direction in ("backward", "both"):
        for t in range(anchor_index - 1, -1, -1):
            if np.isfinite(v[t]):
                break
            if not np.isfinite(g[t + 1]):
                break
            if g[t + 1] <= -100:
                raise DomainError("growth of -100% or less cannot be extrapolated")
            v[t] = v[t + 1] / (1.0 + g[t + 1] / 100.0)
    return v


def backfill_trade(primary, donor_growth_a=None, donor_growth_b=None):
    """Complete a bilateral trade series.

    Years before the first observation are extrapolated backwards with the
    mean of the available donor growth rates (%), later gaps carry the last
    known value, and a fully missing series becomes zero.
    """
    v = np.array(primary, dtype=float)
    known = np.flatnonzero(np.isfinite(v))
    if known.size == 0:
        return np.zeros_like(v)
    donors = [np.asarray(d, dtype=float) for d in (donor_growth_a, donor_growth_b) if d is not None]
    if donors:
        stacked = np.vstack(donors)
        seen = np.isfinite(stacked)
        count = seen.sum(axis=0)
        growth = np.where(count > 0, np.where(seen, stacked, 0.0).sum(axis=0) / np.maximum(count, 1), np.nan)
        v = extrapolate_by_growth(v, growth, known[0], direction="backward")
    last = np.nan
    for t in range(v.size):
        if np.isfinite(v[t]):
            last = v[t]
        elif np.isfinite(last):
            v[t] = last
    # leading gaps the donors could not cover
    first = np.flatnonzero(np.isfinite(v))[0]
    v[:first] = v[first]
    return v


def religious_similarity(shares, other_column=None):
    """Pairwise dot products of adherence-share vectors, ``(N, R) -> (N, N)``."""
    a = np.asarray(shares, dtype=float)
    if other_column is not None:
        a = np.delete(a, other_column, axis=1)
    return a @ a.T


def mean_distance(distance_by_year):
    """Time-averaged pairwise distance, ignoring missing years."""
    with np.errstate(invalid="ignore"):
        return np.nanmean(np.asarray(distance_by_year, dtype=float), axis=0)


# --- tables and the edge design ---------------------------------------------

@dataclass(frozen=True)
class CovariateTable:
    """Raw values of one covariate: ``(years, N)`` or ``(years, N, N)``."""

    name: str
    values: np.ndarray
    arity: str = COUNTRY
    binary: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expected = 2 if self.arity == COUNTRY else 3
        if v.ndim != expected:
            raise StructuralError(f"{self.name}: expected {expected}-d values, got {v.ndim}-d")
        if self.binary and not np.all(np.isin(v[np.isfinite(v)], (0.0, 1.0))):
            raise DomainError(f"{self.name}: binary covariate must be 0 or 1")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def pooled(self):
        """Values entering the transform fit; pair diagonals are excluded."""
        if self.arity == COUNTRY:
            return self.values.ravel()
        n = self.values.shape[1]
        off = ~np.eye(n, dtype=bool)
        return self.values[:, off].ravel()


@dataclass(frozen=True)
class SlotTransform:
    lam: float | None
    standardizer: Standardizer | None

    def apply(self, x):
        y = x if self.lam is None else psi(x, self.lam)
        return y if self.standardizer is None else self.standardizer.apply(y)

    def derivative(self, x):
        """``d chi / d x`` for raw values ``x``."""
        d = np.ones_like(np.asarray(x, dtype=float)) if self.lam is None else psi_prime(x, self.lam)
        return d if self.standardizer is None else d / self.standardizer.std

    def to_dict(self):
        s = self.standardizer
        return {"lambda": self.lam, "mean": None if s is None else s.mean, "std": None if s is None else s.std}

    @classmethod
    def from_dict(cls, d):
        s = None if d.get("std") is None else Standardizer(d["mean"], d["std"])
        return cls(d.get("lambda"), s)


def _constant(samples):
    return samples.size > 0 and np.ptp(samples) == 0


def fit_slot_transform(samples, transformed=True, lam=None):
    """Power transform plus standardiser fitted on ``samples``.

    Constant samples carry no information; they are only centred (unit scale,
    identity power) and a warning is logged.
    """
    samples = np.asarray(samples, dtype=float)
    samples = samples[np.isfinite(samples)]
    if _constant(samples):
        log.warning("constant covariate values; centring without scaling")
        lam = lam if lam is not None else (1.0 if transformed else None)
        y = psi(samples, lam) if lam is not None else samples
        return SlotTransform(lam, Standardizer(float(y.mean()), 1.0))
    if transformed and lam is None:
        lam = fit_lambda(samples).lam
    y = psi(samples, lam) if transformed else samples
    return SlotTransform(lam if transformed else None, fit_standardizer(y))


def edge_index(n, mask=None):
    """Edges ``(i, j, k)`` with ``j != k`` in lexicographic order."""
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    keep = j != k
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    return i[keep], j[keep], k[keep]


def _pick(values, slot, i, j, k):
    """Index a per-year country ``(N,)`` or pair ``(N, N)`` array by slot pattern."""
    idx = {"B": i, "O": j, "D": k}
    if len(slot) == 1:
        return values[idx[slot]]
    return values[idx[slot[0]], idx[slot[1]]]


@dataclass
class EdgeDesign:
    """Frozen covariate pipeline plus the edge list of a registry.

    ``static`` holds the transformed, standardised non-stock components for
    every year, shape ``(years, E, d_static)``. Stock components are produced
    on demand by :meth:`stock_features`.
    """

    n: int
    years: list
    slots: list
    transforms: dict
    stock_transform: SlotTransform
    edges: tuple
    raw: np.ndarray = field(repr=False)
    static: np.ndarray = field(repr=False)

    @property
    def n_edges(self):
        return self.edges[0].size

    @property
    def input_dim(self):
        return len(self.slots)

    @property
    def static_dim(self):
        return len(self.slots) - len(STOCK_SLOTS)

    def layout_hash(self):
        payload = json.dumps({"version": LAYOUT_VERSION, "slots": self.slots}).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def year_offset(self, year):
        try:
            return self.years.index(year)
        except ValueError:
            raise IngestionError(f"covariates do not cover year {year}") from None

    def stock_flat_index(self):
        """Flat indices of ``S[i, j]`` and ``S[i, k]`` for every edge, ``(E, 2)``."""
        i, j, k = self.edges
        return np.stack([i * self.n + j, i * self.n + k], axis=1)

    def stock_features(self, stocks):
        s = np.asarray(stocks, dtype=float)
        chi = self.stock_transform.apply(s)
        return chi.ravel()[self.stock_flat_index()]

    def features(self, year, stocks):
        """Full ``(E, d)`` covariate matrix for ``year`` given stock table ``stocks``."""
        t = self.year_offset(year)
        return np.concatenate([self.static[t], self.stock_features(stocks)], axis=1)

    def raw_features(self, year, stocks):
        t = self.year_offset(year)
        s = np.asarray(stocks, dtype=float).ravel()[self.stock_flat_index()]
        return np.concatenate([self.raw[t], s], axis=1)

    def slot_derivatives(self, year, stocks):
        """``d chi / d x`` per edge and slot at raw values; binary slots give 0."""
        raw = self.raw_features(year, stocks)
        out = np.zeros_like(raw)
        for c, slot in enumerate(self.slots):
            tr = self.stock_transform if slot in STOCK_SLOTS else self.transforms.get(slot_key(*slot))
            if tr is None:
                continue
            out[:, c] = tr.derivative(raw[:, c])
        return out

    def continuous_slots(self):
        return [c for c, s in enumerate(self.slots)
                if s[0] not in KRONECKER and not (s[0] in COVARIATES and COVARIATES[s[0]][1])]

    def subset(self, mask):
        """Design restricted to edges where ``mask[i, j, k]`` holds."""
        keep = np.asarray(mask, dtype=bool)[self.edges]
        edges = tuple(e[keep] for e in self.edges)
        return EdgeDesign(self.n, self.years, self.slots, self.transforms, self.stock_transform,
                          edges, self.raw[:, keep], self.static[:, keep])

    def astype(self, dtype):
        return EdgeDesign(self.n, self.years, self.slots, self.transforms, self.stock_transform,
                          self.edges, self.raw, self.static.astype(dtype))

    def pipeline_dict(self):
        return {
            "layout_version": LAYOUT_VERSION,
            "slots": [list(s) for s in self.slots],
            "transforms": {k: v.to_dict() for k, v in sorted(self.transforms.items())},
            "stock_transform": self.stock_transform.to_dict(),
        }


def layout_for(tables):
    present = set(tables)
    slots = []
    for name, pattern in CANONICAL_SLOTS:
        if name in KRONECKER or name == "migrant_stock" or name in present:
            slots.append((name, pattern))
    return slots


def slot_key(name, pattern):
    return f"{name}:{pattern}"


def slot_values(tables, name, pattern, edges):
    """Raw values of one slot for every year and edge, shape ``(years, E)``."""
    i, j, k = edges
    return np.stack([_pick(v, pattern, i, j, k) for v in tables[name].values])


def fit_pipeline(tables, stock_samples, lambdas=None, stock_lambda=None):
    """Fit the transforms of every continuous slot and of migrant stocks.

    The power of a covariate is fitted once on its pooled table values and
    shared by all its slots; ``lambdas`` overrides it by covariate name.
    Standardisation statistics are fitted per slot, pooled over all years and
    edges, so every continuous component is centred on the edges it feeds.
    """
    lambdas = lambdas or {}
    transforms = {}
    if tables:
        n = next(iter(tables.values())).values.shape[1]
        edges = edge_index(n)
        powers = {}
        for name, pattern in layout_for(tables):
            if name not in tables or COVARIATES[name][1]:
                continue
            powered = COVARIATES[name][2]
            if powered and name not in powers:
                powers[name] = lambdas.get(name)
                if powers[name] is None:
                    pooled = tables[name].pooled()
                    pooled = pooled[np.isfinite(pooled)]
                    powers[name] = 1.0 if _constant(pooled) else fit_lambda(pooled).lam
            x = slot_values(tables, name, pattern, edges)
            transforms[slot_key(name, pattern)] = fit_slot_transform(x, powered, powers.get(name))
    stock = fit_slot_transform(np.asarray(stock_samples, dtype=float).ravel(), True, stock_lambda)
    return transforms, stock


def build_design(n, years, tables, transforms, stock_transform, edge_mask=None):
    for name in tables:
        if name not in COVARIATES:
            raise IngestionError(f"unknown covariate {name!r}")
    slots = layout_for(tables)
    i, j, k = edge_index(n, edge_mask)
    n_static = len(slots) - len(STOCK_SLOTS)
    raw = np.zeros((len(years), i.size, n_static))
    static = np.zeros_like(raw)
    for t, year in enumerate(years):
        for c, (name, pattern) in enumerate(slots[:n_static]):
            if name in KRONECKER:
                a, b = (i, j) if pattern == "BO" else (i, k)
                raw[t, :, c] = (a == b)
                static[t, :, c] = raw[t, :, c]
                continue
            table = tables[name]
            if t >= table.values.shape[0]:
                raise IngestionError(f"covariate {name!r} has no values for year {year}")
            x = _pick(table.values[t], pattern, i, j, k)
            if not np.all(np.isfinite(x)):
                raise IngestionError(f"covariate {name!r} has missing values in year {year}")
            raw[t, :, c] = x
            tr = transforms.get(slot_key(name, pattern))
            static[t, :, c] = x if tr is None else tr.apply(x)
    return EdgeDesign(n, list(years), slots, transforms, stock_transform, (i, j, k), raw, static)


def build_edge_covariates(n, years, year, tables, stocks, transforms, stock_transform):
    """``(E, d)`` covariate vectors of every edge in ``year`` plus the edge index.

    ``years`` lists the years the covariate tables cover.
    """
    years = list(years)
    if year not in years:
        raise IngestionError(f"covariates do not cover year {year}")
    t = years.index(year)
    single = {name: CovariateTable(tb.name, tb.values[t:t + 1], tb.arity, tb.binary) for name, tb in tables.items()}
    design = build_design(n, [year], single, transforms, stock_transform)
    return design.features(year, stocks), design.edges
