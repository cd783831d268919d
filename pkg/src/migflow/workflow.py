"""Dataset-level glue used by the command line and the test harness.

These helpers take a loaded :class:`~migflow.io.Dataset` (or a synthetic
world) through covariate design, training, calibration, uncertainty and the
classical baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import covariates as cov
from .accounting import stock_uncertainty
from .baselines import demographic_accounting_flows, stock_diff_drop, stock_diff_reverse
from .domain import StockTable
from .errors import EstimationError, StructuralError
from .estimation import InitialStockSampler, calibrate_initial_stock, survival_for_stocks, uq_estimate
from .io import Dataset
from .network import Architecture
from .training import rollout, train

log = logging.getLogger(__name__)

# the re-estimates only set a spread, so their balancing need not be tight
UNCERTAINTY_IPF_TOL = 1e-6


def pipeline_from_dict(d):
    """Inverse of :meth:`EdgeDesign.pipeline_dict`: ``(transforms, stock_transform, slots)``."""
    if d.get("layout_version") != cov.LAYOUT_VERSION:
        raise StructuralError(f"covariate layout version {d.get('layout_version')} is not supported")
    transforms = {k: cov.SlotTransform.from_dict(v) for k, v in d["transforms"].items()}
    return transforms, cov.SlotTransform.from_dict(d["stock_transform"]), [tuple(s) for s in d["slots"]]


def fit_design(dataset, pipeline=None, lambdas=None):
    """Covariate design for ``dataset``.

    With ``pipeline`` (a dict stored in a checkpoint) the frozen transforms are
    reused and the slot layout must match; otherwise transforms are fitted on
    the panel and the initial stock table.
    """
    if pipeline is not None:
        transforms, stock_tr, slots = pipeline_from_dict(pipeline)
        design = cov.build_design(dataset.n, dataset.axis.years, dataset.tables, transforms, stock_tr)
        if design.slots != slots:
            raise StructuralError("dataset covariates do not match the trained layout")
        return design
    transforms, stock_tr = cov.fit_pipeline(dataset.tables, dataset.initial_stocks().values, lambdas)
    return cov.build_design(dataset.n, dataset.axis.years, dataset.tables, transforms, stock_tr)


def world_dataset(world, observations):
    """In-memory dataset of a corrupted synthetic world, truth attached."""
    return Dataset(world.registry, world.axis, world.tables, world.rates, observations.stocks,
                   observations.targets, world.flows, world.stocks)


def architecture(design, **kwargs):
    return Architecture(design.input_dim, **kwargs)


def fit(dataset, config, arch_kwargs=None, design=None, callback=None):
    """Train one network on ``dataset``; returns ``(TrainResult, design)``."""
    design = design or fit_design(dataset)
    arch = architecture(design, **(arch_kwargs or {}))
    result = train(config, dataset.targets, design, dataset.rates, dataset.initial_stocks(), arch,
                   callback=callback)
    return result, design


def filled_stocks(dataset, predicted=None):
    """Stock tables with unobserved cells filled.

    Cells are taken from ``predicted`` when given; otherwise each cell's
    observed series is linearly interpolated in time and held flat beyond its
    first and last observation. Cells never observed are 0.
    """
    series = dataset.stocks
    vals = np.array(series.values, dtype=float)
    obs = series.observed
    if predicted is not None:
        return np.where(obs, vals, np.asarray(predicted, dtype=float))
    years = np.asarray(series.years, dtype=float)
    out = np.zeros_like(vals)
    n = vals.shape[1]
    for i in range(n):
        for j in range(n):
            seen = obs[:, i, j]
            if seen.any():
                out[:, i, j] = np.interp(years, years[seen], vals[seen, i, j])
    return out


@dataclass
class MemberCalibration:
    offsets: np.ndarray
    initial: np.ndarray
    floored: int
    skipped: int


def calibrate_member(params, dataset, design, config):
    """Shift a member's rollout onto the observed stocks through its initial table."""
    init = dataset.initial_stocks()
    result = rollout(params, init, design, dataset.rates, config=config)
    survival = survival_for_stocks(dataset.rates, dataset.axis.start_year, result.stocks.shape[0])
    cal = calibrate_initial_stock(dataset.stocks, result.stocks, dataset.stocks.weights, survival)
    initial = np.maximum(init.values + cal.offsets, 0.0)
    return MemberCalibration(cal.offsets, initial, int(cal.floored.sum()), int(cal.skipped.sum()))


def initial_stock_sigma(dataset, initial):
    """Per-cell standard deviation of the initial stock table.

    Derived from demographic re-estimates of the first two stock tables, with
    unobserved cells interpolated in time and the first table replaced by
    ``initial``.
    """
    tables = filled_stocks(dataset)
    if tables.shape[0] < 2:
        raise EstimationError("need at least two stock tables for the initial-stock uncertainty")
    y0 = dataset.stocks.years[0]
    first = StockTable(np.asarray(initial, dtype=float), y0)
    second = StockTable(tables[1], y0 + 1)
    return stock_uncertainty([first, second], dataset.rates, tol=UNCERTAINTY_IPF_TOL)[0].sigma


def estimate(members, dataset, design, config, n_samples, seed, calibrate=True):
    """Calibrated ensemble pushforward; returns ``(UncertaintyEstimate, calibrations)``."""
    if calibrate:
        cals = [calibrate_member(p, dataset, design, config) for p in members]
    else:
        init = dataset.initial_stocks().values
        cals = [MemberCalibration(np.zeros_like(init), init, 0, 0) for _ in members]
    sigma = initial_stock_sigma(dataset, cals[0].initial)
    samplers = [InitialStockSampler(c.initial, sigma, seed=[seed, m]) for m, c in enumerate(cals)]
    est = uq_estimate(members, samplers[0], n_samples, design, dataset.rates, config,
                      initial_for=lambda m, _: samplers[m].draw())
    return est, cals


BASELINES = ("stock_diff_drop", "stock_diff_reverse", "demographic_accounting")


def baseline_flows(dataset, method):
    """Per-year flow measures of a stock-based estimator over consecutive tables.

    Returns a list of ``(year, od, birth_destination, tensor)``; ``tensor`` is
    the full flow tensor for demographic accounting and ``None`` otherwise.
    """
    if method not in BASELINES:
        raise StructuralError(f"unknown baseline {method!r}; choose from {', '.join(BASELINES)}")
    tables = filled_stocks(dataset)
    years = dataset.stocks.years
    out = []
    for t in range(len(years) - 1):
        s1, s2 = StockTable(tables[t], years[t]), StockTable(tables[t + 1], years[t + 1])
        if method == "demographic_accounting":
            T = demographic_accounting_flows(s1, s2, dataset.rates).flows.values
            out.append((years[t], T.sum(axis=0), T.sum(axis=1), T))
            continue
        fn = stock_diff_drop if method == "stock_diff_drop" else stock_diff_reverse
        flows = fn(s1, s2)
        out.append((years[t], flows.od, flows.birth_destination, None))
    return out
