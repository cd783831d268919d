"""Synthetic validation worlds: generation, corruption and recovery scoring.

Flows are generated as ``T = eta * exp(<chi, alpha>)`` from the same
covariate pipeline the estimator uses, with stocks fed back year by year, so
the true flow function lies inside the model class.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import covariates as cov
from .domain import (
    ClampCounter,
    CountryRegistry,
    DemographicRates,
    StockSeries,
    StockTable,
    TargetDataset,
    TimeAxis,
    stock_step,
)
from .accounting import native_born
from .baselines import pearson
from .errors import DomainError, IngestionError, MigflowError, StructuralError
from .network import Architecture
from .training import TrainConfig, rollout, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldSpec:
    n_countries: int = 30
    n_years: int = 10
    start_year: int = 2010
    eta: float = 100.0
    alpha_max: float = 0.5
    stock_range: tuple = (1e2, 1e5)
    population_range: tuple = (1e6, 1e8)


@dataclass(frozen=True)
class CorruptionSpec:
    stock_noise: float = 0.10
    flow_noise: float = 0.20
    net_noise: float = 0.05
    flow_mask: float = 0.80
    net_mask: float = 0.80
    stock_mask: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("stock_noise", "flow_noise", "net_noise"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        for name in ("flow_mask", "net_mask", "stock_mask"):
            if not 0 <= getattr(self, name) < 1:
                raise DomainError(f"{name} must lie in [0, 1)")

    @classmethod
    def clean(cls, seed=0):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed)


def _sparse(rng, shape, p, off_diagonal=False):
    """Bernoulli mask with at least one hit, so no covariate comes out constant."""
    mask = rng.random(shape) < p
    if off_diagonal:
        np.fill_diagonal(mask, False)
    if not mask.any():
        flat = np.flatnonzero(~np.eye(shape[0], dtype=bool)) if off_diagonal else np.arange(mask.size)
        mask.flat[rng.choice(flat)] = True
    return mask


def random_panel(n, n_years, rng, population_range=(1e6, 1e8)):
    """Random covariate tables with plausible scales and temporal variation."""
    y = n_years
    pop0 = np.exp(rng.uniform(np.log(population_range[0]), np.log(population_range[1]), n))
    pop_growth = rng.normal(0.01, 0.008, n)
    population = pop0 * np.exp(np.outer(np.arange(y), pop_growth) + rng.normal(0, 0.002, (y, n)).cumsum(0))

    life = rng.uniform(55, 82, n) + np.outer(np.arange(y), rng.uniform(0.05, 0.3, n)) + rng.normal(0, 0.2, (y, n))
    birth_rate = np.clip(rng.uniform(0.008, 0.04, n) + rng.normal(0, 0.001, (y, n)), 0.004, None)
    death_rate = np.clip(rng.uniform(0.005, 0.015, n) + rng.normal(0, 0.0005, (y, n)), 0.002, None)

    # real GDP per capita as a random walk in log space with occasional crises
    log_gdp = np.empty((y + 1, n))
    log_gdp[0] = rng.uniform(np.log(500), np.log(60000), n)
    for t in range(1, y + 1):
        shock = rng.normal(0.02, 0.03, n) - 0.1 * (rng.random(n) < 0.05)
        log_gdp[t] = log_gdp[t - 1] + shock
    gdp_full = np.exp(log_gdp)
    growth = np.stack([cov.gdp_growth(gdp_full[:, c]) for c in range(n)], axis=1)[1:]
    gdp = gdp_full[1:]

    trade0 = np.exp(rng.normal(18, 2.5, (n, n)))
    trade = trade0[None] * np.exp(rng.normal(0.03, 0.08, (y, n, n)).cumsum(0))

    lat = np.arcsin(rng.uniform(-1, 1, n))
    lon = rng.uniform(-np.pi, np.pi, n)
    cos_angle = (np.sin(lat)[:, None] * np.sin(lat)[None, :]
                 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.cos(lon[:, None] - lon[None, :]))
    distance = 6371.0 * np.arccos(np.clip(cos_angle, -1, 1))

    shares = rng.dirichlet(np.full(6, 0.4), n)
    religion = cov.religious_similarity(shares, other_column=5)
    lang = rng.random((n, n)) * (rng.random((n, n)) < 0.3)
    lang = np.maximum(lang, lang.T)
    np.fill_diagonal(lang, 1.0)

    conflict = np.where(_sparse(rng, (y, n), 0.1), np.exp(rng.normal(6, 2, (y, n))), 0.0)
    ref0 = np.where(_sparse(rng, (n, n), 0.15, off_diagonal=True), np.exp(rng.normal(8, 2, (n, n))), 0.0)
    np.fill_diagonal(ref0, 0.0)
    ref_path = [ref0]
    for t in range(y):
        step = ref_path[-1] * np.exp(rng.normal(0, 0.2, (n, n)))
        step += np.where(rng.random((n, n)) < 0.02, np.exp(rng.normal(7, 2, (n, n))), 0.0)
        np.fill_diagonal(step, 0.0)
        ref_path.append(step)
    refugees = np.stack(ref_path)
    refugee_stock = refugees[1:]
    refugee_change = refugees[1:] - refugees[:-1]

    eu = np.repeat((rng.random(n) < 0.3).astype(float)[None], y, axis=0)
    colony = (rng.random((n, n)) < 0.08).astype(float)
    np.fill_diagonal(colony, 0.0)

    def const(a):
        return np.repeat(a[None], y, axis=0)

    raw = {
        "population": population,
        "life_expectancy": life,
        "birth_rate": birth_rate,
        "death_rate": death_rate,
        "gdp_per_capita": gdp,
        "gdp_growth": growth,
        "trade": trade,
        "distance": const(distance),
        "religious_similarity": const(religion),
        "linguistic_similarity": const(lang),
        "conflict_deaths": conflict,
        "refugee_stock": refugee_stock,
        "refugee_change": refugee_change,
        "eu": eu,
        "colony": const(colony),
    }
    return {name: cov.CovariateTable(name, v, cov.COVARIATES[name][0], cov.COVARIATES[name][1])
            for name, v in raw.items()}


def rates_from_panel(axis, tables):
    pop = tables["population"].values
    br = tables["birth_rate"].values
    return DemographicRates(axis, births=br * pop, death_rate=tables["death_rate"].values,
                            population=pop, birth_rate=br)


@dataclass
class SyntheticWorld:
    registry: CountryRegistry
    axis: TimeAxis
    tables: dict
    rates: DemographicRates
    design: cov.EdgeDesign
    alpha: np.ndarray
    eta: float
    flows: np.ndarray
    stocks: np.ndarray
    clamped_cells: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.registry)

    @property
    def years(self):
        return self.axis.years

    @property
    def stock_years(self):
        return self.axis.years + [self.axis.end_year + 1]

    def od_flows(self):
        return self.flows.sum(axis=1)

    def net_migration(self):
        F = self.od_flows()
        return F.sum(axis=1) - F.sum(axis=2)


def initial_stock_table(n, population, rng, stock_range):
    lo, hi = np.log(stock_range[0]), np.log(stock_range[1])
    s = np.exp(rng.uniform(lo, hi, (n, n)))
    np.fill_diagonal(s, 0.0)
    return native_born(population, StockTable(s, 0)).values


def generate(spec=WorldSpec(), seed=0, tables=None, alpha=None):
    """Generate a world whose flows follow ``eta * exp(<chi, alpha>)``.

    ``tables`` overrides the random covariate panel; ``alpha`` overrides the
    random coefficients (length must match the covariate layout).
    """
    rng = np.random.default_rng(seed)
    n, y = spec.n_countries, spec.n_years
    registry = CountryRegistry(tuple(f"C{c:02d}" for c in range(n)))
    axis = TimeAxis(spec.start_year, spec.start_year + y - 1)
    panel_rng, stock_rng, alpha_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, 3))
    if tables is None:
        tables = random_panel(n, y, panel_rng, spec.population_range)
    if "population" not in tables or "birth_rate" not in tables or "death_rate" not in tables:
        raise IngestionError("population, birth_rate and death_rate tables are required")
    rates = rates_from_panel(axis, tables)
    s0 = initial_stock_table(n, rates.population[0], stock_rng, spec.stock_range)
    transforms, stock_tr = cov.fit_pipeline(tables, s0)
    design = cov.build_design(n, axis.years, tables, transforms, stock_tr)
    if alpha is None:
        alpha = alpha_rng.uniform(0.0, spec.alpha_max, design.input_dim)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (design.input_dim,):
        raise DomainError(f"alpha must have length {design.input_dim}")

    edges = design.edges
    flows = np.zeros((y, n, n, n))
    stocks = np.zeros((y + 1, n, n))
    stocks[0] = s0
    clamps = ClampCounter()
    for t, year in enumerate(axis.years):
        chi = design.features(year, stocks[t])
        flows[t][edges] = spec.eta * np.exp(chi @ alpha)
        stocks[t + 1] = stock_step(stocks[t], flows[t], rates, year, clamps).values
    return SyntheticWorld(registry, axis, tables, rates, design, alpha, spec.eta, flows, stocks,
                          clamps.cells, {"seed": seed, "spec": spec.__dict__})


@dataclass
class Observations:
    """Corrupted view of a world: training targets plus the observed stock tables."""

    targets: TargetDataset
    stocks: StockSeries
    initial_stocks: StockTable


def _noisy(values, level, rng):
    if level == 0:
        return np.array(values, dtype=float)
    return values * (1.0 + rng.normal(0.0, level, np.shape(values)))


def _choose(count, fraction_masked, rng):
    """Boolean mask with exactly ``round((1 - fraction_masked) * count)`` true entries."""
    keep = int(round((1.0 - fraction_masked) * count))
    mask = np.zeros(count, dtype=bool)
    mask[rng.permutation(count)[:keep]] = True
    return mask


def corrupt_observations(world, spec=CorruptionSpec()):
    rng = np.random.default_rng(spec.seed)
    n = world.n
    years = world.years
    stock_years = world.stock_years
    stock_rng, flow_rng, net_rng, mask_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, 4))

    # noise first, then masking
    s_obs = np.maximum(_noisy(world.stocks, spec.stock_noise, stock_rng), 0.0)
    f_obs = np.maximum(_noisy(world.od_flows(), spec.flow_noise, flow_rng), 0.0)
    mu_obs = _noisy(world.net_migration(), spec.net_noise, net_rng)

    cells = _choose(s_obs.size, spec.stock_mask, mask_rng).reshape(s_obs.shape)
    off = ~np.eye(n, dtype=bool)
    n_corr = int(off.sum())
    observed_corr = np.zeros((n, n), dtype=bool)
    observed_corr[off] = _choose(n_corr, spec.flow_mask, mask_rng)
    net_observed = _choose(n, spec.net_mask, mask_rng)

    rows = []
    for i in range(n):
        for j in range(n):
            seen = np.flatnonzero(cells[:, i, j])
            for a, b in zip(seen[:-1], seen[1:]):
                rows.append((stock_years[a], stock_years[b], i, j, s_obs[b, i, j] - s_obs[a, i, j], 1.0))
    stock_rows = np.array(rows, dtype=float).reshape(-1, 6)

    jj, kk = np.nonzero(observed_corr)
    flow_rows = [(years[t], j, k, f_obs[t, j, k], 1.0, np.nan) for t in range(len(years)) for j, k in zip(jj, kk)]
    net_rows = [(years[t], j, mu_obs[t, j], 1.0) for t in range(len(years)) for j in np.flatnonzero(net_observed)]
    test = off & ~observed_corr if spec.flow_mask > 0 else None
    targets = TargetDataset(stock_rows, np.array(flow_rows, dtype=float).reshape(-1, 6),
                            np.array(net_rows, dtype=float).reshape(-1, 4), test)

    values = np.where(cells, s_obs, np.nan)
    series = StockSeries(tuple(stock_years), values, cells)
    # earliest observed value per cell stands in for a masked initial entry
    first = np.argmax(cells, axis=0)
    init = np.take_along_axis(s_obs, first[None], axis=0)[0]
    init = np.where(cells.any(axis=0), init, 0.0)
    return Observations(targets, series, StockTable(init, stock_years[0]))


def corrupt(world, spec=CorruptionSpec()):
    return corrupt_observations(world, spec).targets


def corridor_correlations(estimate_od, true_od):
    """Per-corridor time-series R for ``(years, N, N)`` arrays, ``nan`` on the diagonal."""
    n = true_od.shape[1]
    out = np.full((n, n), np.nan)
    for j in range(n):
        for k in range(n):
            if j != k:
                out[j, k] = pearson(estimate_od[:, j, k], true_od[:, j, k])
    return out


def evaluate_recovery(estimates, world, test_corridors=None):
    """Recovery metrics of estimated flows ``(years, N, N, N)`` against the truth.

    ``world`` is a :class:`SyntheticWorld` or the true flow array itself.

    Reports the median relative error and Pearson R over all true flow cells,
    and, per corridor group, the mean of per-corridor time-series R and the
    R pooled over the group's origin-destination flows.
    """
    est = np.asarray(estimates, dtype=float)
    true = np.asarray(getattr(world, "flows", world), dtype=float)
    if est.shape != true.shape:
        raise DomainError(f"estimate shape {est.shape} does not match {true.shape}")
    n = true.shape[1]
    off = ~np.eye(n, dtype=bool)
    cell = np.broadcast_to(off[None, None], true.shape)
    rel = np.abs(est[cell] - true[cell]) / true[cell]
    metrics = {
        "median_relative_error": float(np.median(rel)),
        "pearson_r": pearson(est[cell], true[cell]),
    }
    est_od, true_od = est.sum(axis=1), true.sum(axis=1)
    per = corridor_correlations(est_od, true_od)
    groups = {"all": off}
    if test_corridors is not None:
        test = np.asarray(test_corridors, dtype=bool) & off
        groups["train"] = off & ~test
        groups["test"] = test
    for name, mask in groups.items():
        vals = per[mask]
        vals = vals[np.isfinite(vals)]
        metrics[f"{name}_corridor_r"] = float(vals.mean()) if vals.size else float("nan")
        metrics[f"{name}_pooled_r"] = pearson(est_od[:, mask], true_od[:, mask])
        rel_od = np.abs(est_od[:, mask] - true_od[:, mask]) / true_od[:, mask]
        metrics[f"{name}_median_relative_error"] = float(np.median(rel_od)) if rel_od.size else float("nan")
    return metrics


SWEEP_KEYS = ("depth", "width", "activation", "latent_dim", "lam")


def sweep_points(grid):
    """Cartesian product of ``grid`` in :data:`SWEEP_KEYS` order, as dicts."""
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise StructuralError(f"unknown sweep dimensions: {', '.join(sorted(unknown))}")
    keys = [k for k in SWEEP_KEYS if k in grid]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(list(grid[k]) for k in keys))]


def sweep(world, observations, grid, config=None, arch=None):
    """Train and score one network per grid point on the same corrupted world.

    ``arch`` holds the architecture defaults a grid point does not set;
    ``lam`` sets all three target transforms. A failing point yields a row
    with ``status`` set to the error message; the sweep carries on.
    """
    config = config or TrainConfig()
    base_arch = {"latent_dim": 100, "depth": 7, "width": 60, "activation": "tanh"}
    base_arch.update(arch or {})
    transforms, stock_tr = cov.fit_pipeline(world.tables, observations.initial_stocks.values)
    design = cov.build_design(world.n, world.years, world.tables, transforms, stock_tr)
    rows = []
    for point in sweep_points(grid):
        kw = {k: point.get(k, v) for k, v in base_arch.items()}
        cfg = config
        if "lam" in point:
            lam = float(point["lam"])
            cfg = replace(config, lam_stock=lam, lam_net=lam, lam_flow=lam)
        row = dict(kw, lam_stock=cfg.lam_stock, lam_net=cfg.lam_net, lam_flow=cfg.lam_flow, seed=cfg.seed)
        try:
            net = Architecture(design.input_dim, **kw)
            result = train(cfg, observations.targets, design, world.rates, observations.initial_stocks, net)
            est = rollout(result.params, observations.initial_stocks, design, world.rates, config=cfg)
            row.update(evaluate_recovery(est.flows, world, observations.targets.test_corridors))
            row["final_loss"] = result.history[-1].total if result.history else float("nan")
            row["status"] = "ok"
        except (MigflowError, FloatingPointError) as exc:
            log.warning("sweep point %s failed: %s", point, exc)
            row["status"] = f"failed: {exc}"
        rows.append(row)
    return rows
