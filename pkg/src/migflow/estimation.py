"""Products derived from trained networks.

Initial-stock calibration, elasticities of the estimated flows with respect to
each raw covariate, and ensemble-by-initial-stock pushforward uncertainty.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .errors import DomainError, MigflowError, RunError, StructuralError
from .network import backward, forward
from .training import TrainConfig, rollout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurvivalFractions:
    years: tuple
    values: np.ndarray


def survival_fraction(gamma, years=None):
    """``prod_{t0 < tau <= t} (1 - gamma(tau))`` per column, 1 at the first year.

    ``gamma`` has shape ``(years,)`` or ``(years, N)``.
    """
    g = np.asarray(gamma, dtype=float)
    if np.any(g >= 1) or np.any(g < 0):
        raise DomainError("mortality must lie in [0, 1)")
    out = np.ones_like(g)
    out[1:] = np.cumprod(1.0 - g[1:], axis=0)
    years = tuple(range(len(g))) if years is None else tuple(years)
    return SurvivalFractions(years, out)


def survival_for_stocks(rates, start_year, n_tables):
    """Survival fractions aligned with beginning-of-year stock tables.

    A table at ``t`` has been thinned by the mortality of flow years
    ``t0 .. t-1``, so the rate series is shifted by one year.
    """
    g = np.zeros((n_tables, rates.n))
    for t in range(1, n_tables):
        g[t] = rates.at(start_year + t - 1)[1]
    return survival_fraction(g, range(start_year, start_year + n_tables))


@dataclass
class Calibration:
    offsets: np.ndarray
    shifted: np.ndarray
    skipped: np.ndarray
    floored: np.ndarray


def calibrate_initial_stock(observed, predicted, weights, survival):
    """Offsets ``b_ij`` minimising ``sum_t w (S - S_hat - g~_j b)^2``.

    ``observed`` values are ``(Y, N, N)`` with ``nan`` where unobserved (or a
    :class:`StockSeries`); ``predicted`` has the same shape; ``survival`` is
    ``(Y, N)``. Offsets are raised where needed to keep every shifted value
    non-negative. Cells without observations keep ``b = 0`` and are flagged.
    """
    s_obs = np.asarray(getattr(observed, "values", observed), dtype=float)
    if hasattr(observed, "observed"):
        s_obs = np.where(observed.observed, s_obs, np.nan)
    pred = np.asarray(predicted, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), s_obs.shape)
    g = np.asarray(getattr(survival, "values", survival), dtype=float)
    if pred.shape != s_obs.shape or g.shape != (s_obs.shape[0], s_obs.shape[2]):
        raise StructuralError("observed, predicted and survival shapes do not align")
    gj = g[:, None, :]
    seen = np.isfinite(s_obs)
    resid = np.where(seen, s_obs - pred, 0.0)
    num = (np.where(seen, gj * w, 0.0) * resid).sum(axis=0)
    den = np.where(seen, w * gj * gj, 0.0).sum(axis=0)
    skipped = den <= 0
    if skipped.any():
        log.info("calibration skipped %d cells without observations", int(skipped.sum()))
    b = np.divide(num, den, out=np.zeros_like(num), where=~skipped)
    floor = (-pred / np.where(gj > 0, gj, np.inf)).max(axis=0)
    floored = b < floor
    b = np.where(floored, floor, b)
    shifted = np.maximum(pred + gj * b[None], 0.0)
    return Calibration(b, shifted, skipped, floored & ~skipped)


def weighted_sse(b, observed, predicted, weights, survival):
    """Objective of :func:`calibrate_initial_stock` for a single cell's series."""
    obs = np.asarray(observed, dtype=float)
    seen = np.isfinite(obs)
    r = np.where(seen, obs - np.asarray(predicted) - np.asarray(survival) * b, 0.0)
    return float((np.broadcast_to(weights, obs.shape) * r * r).sum())


@dataclass(frozen=True)
class ElasticityReport:
    names: list
    mean: np.ndarray
    std: np.ndarray
    n_samples: int

    def as_rows(self):
        return list(zip(self.names, self.mean.tolist(), self.std.tolist()))


@dataclass(frozen=True)
class EvaluationPoints:
    """Edges and years at which elasticities are evaluated.

    ``edge_rows`` index into the design's edge list; ``year_rows`` into its years.
    """

    edge_rows: np.ndarray
    year_rows: np.ndarray

    @classmethod
    def all(cls, design):
        e, y = np.meshgrid(np.arange(design.n_edges), np.arange(len(design.years)), indexing="ij")
        return cls(e.ravel(), y.ravel())

    @classmethod
    def sample(cls, design, size, seed):
        rng = np.random.default_rng(seed)
        total = design.n_edges * len(design.years)
        pick = np.sort(rng.choice(total, size=min(size, total), replace=False))
        return cls(pick // len(design.years), pick % len(design.years))


def recorded_inputs(params, initial_stocks, design, rates, config=None):
    """Stocks and latent states entering every year of a rollout.

    Returns ``(stocks, latents)`` with ``stocks`` of shape ``(Y + 1, N, N)``
    and ``latents`` a list of ``(E, Z)`` arrays, one per year.
    """
    cfg = config or TrainConfig()
    result = rollout(params, initial_stocks, design, rates, config=cfg)
    arch = params.arch
    latents = [np.zeros((design.n_edges, arch.latent_dim))]
    for t, year in enumerate(design.years[:-1]):
        chi = design.features(year, result.stocks[t])
        _, z, _ = forward(params, chi, latents[-1])
        latents.append(z)
    return result.stocks, latents


def elasticity(members, design, rates, initial_stocks, points=None, config=None):
    """Mean and spread of ``|d log T / d chi_c * d chi_c / d x_c| * |x_c|``.

    Evaluated for every continuous slot ``c`` at the given edge-years, for
    every ensemble member, with the latent state and stocks taken from the
    member's own rollout. Binary and indicator slots are excluded.
    """
    points = points or EvaluationPoints.all(design)
    order = np.lexsort((points.edge_rows, points.year_rows))
    edge_rows, year_rows = points.edge_rows[order], points.year_rows[order]
    cols = design.continuous_slots()
    values = []
    for params in members:
        stocks, latents = recorded_inputs(params, initial_stocks, design, rates, config)
        for t, year in enumerate(design.years):
            rows = edge_rows[year_rows == t]
            if not rows.size:
                continue
            chi = design.features(year, stocks[t])[rows]
            raw = design.raw_features(year, stocks[t])[rows]
            dchi = design.slot_derivatives(year, stocks[t])[rows]
            _, _, tape = forward(params, chi, latents[t][rows])
            grads = backward(tape, np.ones(rows.size)).chi
            values.append(np.abs(grads[:, cols] * dchi[:, cols]) * np.abs(raw[:, cols]))
    if not values:
        raise StructuralError("empty elasticity evaluation sample")
    nu = np.concatenate(values, axis=0)
    names = ["_".join(design.slots[c]) for c in cols]
    return ElasticityReport(names, nu.mean(axis=0), nu.std(axis=0), nu.shape[0])


class Welford:
    """Streaming mean and population variance with optional sample storage."""

    def __init__(self, keep=False):
        self.count = 0
        self.mean = None
        self.m2 = None
        self.samples = [] if keep else None

    def add(self, x):
        x = np.asarray(x, dtype=float)
        if self.samples is not None:
            self.samples.append(x.copy())
        self.count += 1
        if self.mean is None:
            self.mean = x.copy()
            self.m2 = np.zeros_like(x)
            return
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def std(self):
        return np.sqrt(np.maximum(self.m2 / self.count, 0.0))


class InitialStockSampler:
    """Per-cell normal draws around ``mean`` with std ``sigma``, truncated at zero."""

    def __init__(self, mean, sigma, seed=0):
        self.mean = np.asarray(mean, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), self.mean.shape).copy()
        if np.any(self.sigma < 0):
            raise DomainError("stock standard deviations must be non-negative")
        self.rng = np.random.default_rng(seed)

    def draw(self):
        out = self.mean.copy()
        live = self.sigma > 0
        if live.any():
            mu, sd = self.mean[live], self.sigma[live]
            a = (0.0 - mu) / sd
            out[live] = truncnorm.rvs(a, np.inf, loc=mu, scale=sd, random_state=self.rng)
        return out


@dataclass
class UncertaintyEstimate:
    start_year: int
    mean: dict
    std: dict
    n_samples: int
    failures: list = field(default_factory=list)
    samples: dict | None = None


QUANTITIES = ("flows", "od_flows", "stocks", "net_migration")


def uq_estimate(members, sampler, n_samples, design, rates, config=None, keep_samples=False, initial_for=None):
    """Pushforward of ensemble members and initial-stock draws through the rollout.

    ``initial_for(m, draw)`` may supply a member-specific initial table (e.g.
    after per-member calibration); by default every member uses
    ``sampler.draw()``. Draws are taken in a fixed member-major order.
    """
    if not members:
        raise StructuralError("empty ensemble")
    if n_samples < 1:
        raise StructuralError("n_samples must be at least 1")
    acc = {q: Welford(keep_samples) for q in QUANTITIES}
    failures = []
    count = 0
    for m, params in enumerate(members):
        for s in range(n_samples):
            init = sampler.draw() if initial_for is None else initial_for(m, sampler)
            try:
                r = rollout(params, init, design, rates, config=config)
            except (MigflowError, FloatingPointError) as exc:
                failures.append((m, s, str(exc)))
                log.warning("member %d sample %d failed: %s", m, s, exc)
                continue
            for q in QUANTITIES:
                acc[q].add(getattr(r, q))
            count += 1
    if count == 0:
        raise RunError("every ensemble rollout failed")
    samples = {q: np.stack(acc[q].samples) for q in QUANTITIES} if keep_samples else None
    return UncertaintyEstimate(design.years[0], {q: acc[q].mean for q in QUANTITIES},
                               {q: acc[q].std for q in QUANTITIES}, count, failures, samples)
