"""Recursive rollout of the flow estimator and its training loop.

Each year the network sees the static covariates of every edge, the current
estimated stocks ``S[i, j]`` and ``S[i, k]``, and the edge's latent state.
Estimated flows are assembled into the full flow tensor, which advances the
stock table through the demographic balance equation; the new stocks feed the
next year's inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import EstimationError, MigflowError, RunError, StructuralError
from .network import AdamState, Architecture, NetworkParameters, apply_network, init_params, optimizer_step, param_leaves
from .transform import psi

log = logging.getLogger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10_000
    batch_size: int | None = None
    learning_rate: float = 1e-3
    learning_rate_final: float | None = None
    lam_stock: float = 0.7
    lam_net: float = 0.7
    lam_flow: float = 0.7
    seed: int = 0
    test_fraction: float = 0.2
    stock_feedback_grad: bool = True
    log_flow_cap: float = 30.0
    dtype: str = "float64"
    truncate: int | None = None
    init_output_bias: bool = True

    def learning_rate_at(self, epoch):
        """Geometric interpolation from ``learning_rate`` to ``learning_rate_final``."""
        if self.learning_rate_final is None or self.epochs <= 1:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        return self.learning_rate * (self.learning_rate_final / self.learning_rate) ** frac

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise StructuralError("test_fraction must lie in (0, 1)")
        for name in ("lam_stock", "lam_net", "lam_flow", "learning_rate"):
            if not np.isfinite(getattr(self, name)):
                raise StructuralError(f"{name} must be finite")
        if self.epochs < 0 or (self.batch_size is not None and self.batch_size < 1):
            raise StructuralError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate_final is not None and not self.learning_rate_final > 0:
            raise StructuralError("learning_rate_final must be positive")
        if self.dtype not in DTYPES:
            raise StructuralError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass(frozen=True)
class LossBreakdown:
    stock: float
    net: float
    flow: float

    @property
    def total(self):
        return self.stock + self.net + self.flow

    def row(self, epoch):
        return (epoch, self.stock, self.net, self.flow, self.total)


@dataclass
class RolloutResult:
    """Estimated flows ``(Y, N, N, N)``, stocks ``(Y + 1, N, N)``, OD flows and net migration."""

    start_year: int
    flows: np.ndarray
    stocks: np.ndarray
    od_flows: np.ndarray
    net_migration: np.ndarray
    clamped_cells: int = 0
    capped_flows: int = 0

    @property
    def years(self):
        return list(range(self.start_year, self.start_year + self.flows.shape[0]))


@dataclass
class _Graph:
    stocks: ad.Tensor
    od: ad.Tensor
    net: ad.Tensor
    flows: list
    clamped: int
    capped: int


def _simulate(arch, tensors, design, rates, initial, years, cfg):
    """Build the rollout graph; ``tensors`` may or may not require gradients."""
    n = design.n
    dtype = DTYPES[cfg.dtype]
    i, j, k = design.edges
    flat = (i * n + j) * n + k
    stock_idx = design.stock_flat_index()
    tr = design.stock_transform
    s = ad.Tensor(np.asarray(initial, dtype=float))
    z = ad.Tensor(np.zeros((design.n_edges, arch.latent_dim), dtype=dtype))
    diag = np.arange(n)
    stocks, ods, nets, flows = [s], [], [], []
    clamped = capped = 0
    for step, year in enumerate(years):
        if cfg.truncate and step and step % cfg.truncate == 0:
            s, z = s.detach(), z.detach()
        births, gamma = rates.at(year)
        s_in = s if cfg.stock_feedback_grad else s.detach()
        chi_s = ad.psi(s_in, tr.lam) if tr.lam is not None else s_in
        if tr.standardizer is not None:
            chi_s = (chi_s - tr.standardizer.mean) * (1.0 / tr.standardizer.std)
        stock_block = ad.astype(ad.take_flat(chi_s, stock_idx), dtype)
        static = ad.Tensor(design.static[design.year_offset(year)].astype(dtype, copy=False))
        out = apply_network(arch, tensors, [static, stock_block, z])
        log_flow = ad.astype(ad.getitem(out, (slice(None), 0)), np.float64)
        if not np.all(np.isfinite(log_flow.data)):
            e = int(np.flatnonzero(~np.isfinite(log_flow.data))[0])
            raise RunError(f"non-finite log flow in year {year} on edge ({i[e]}, {j[e]}, {k[e]})")
        log_flow, n_cap = ad.clamp_max(log_flow, cfg.log_flow_cap)
        capped += n_cap
        t_edges = ad.exp(log_flow)
        if arch.latent_dim:
            z = ad.getitem(out, (slice(None), slice(1, None)))
        T = ad.scatter_flat(t_edges, (n, n, n), flat)
        od = ad.tsum(T, 0)
        arrivals = ad.tsum(T, 1)
        departures = ad.tsum(T, 2)
        bdiag = np.zeros((n, n))
        bdiag[diag, diag] = births
        s_next = s * (1.0 - gamma)[None, :] + arrivals - departures + bdiag
        s_next, n_clamp = ad.clamp_min_zero(s_next)
        clamped += n_clamp
        nets.append(ad.tsum(od, 0) - ad.tsum(od, 1))
        ods.append(od)
        flows.append(T)
        stocks.append(s_next)
        s = s_next
    return _Graph(ad.stack(stocks), ad.stack(ods), ad.stack(nets), flows, clamped, capped)


def _constants(params):
    return [ad.Tensor(a) for a in params.arrays()]


def rollout(params, initial_stocks, design, rates, years=None, config=None):
    """Run the estimator forward from ``initial_stocks`` over ``years``."""
    cfg = config or TrainConfig()
    years = list(years if years is not None else design.years)
    initial = getattr(initial_stocks, "values", initial_stocks)
    arch = params.arch
    if arch.input_dim != design.input_dim:
        raise StructuralError(f"network expects {arch.input_dim} covariates, design provides {design.input_dim}")
    tensors = [ad.astype(t, DTYPES[cfg.dtype]) for t in _constants(params)]
    g = _simulate(arch, tensors, design, rates, initial, years, cfg)
    return RolloutResult(years[0], np.stack([f.data for f in g.flows]), g.stocks.data, g.od.data,
                         g.net.data, g.clamped, g.capped)


@dataclass
class _TargetIndex:
    """Flat gather indices and transformed targets for one loss term."""

    flat: np.ndarray
    start: np.ndarray | None
    target_psi: np.ndarray
    weights: np.ndarray

    def take(self, rows):
        return _TargetIndex(self.flat[rows], None if self.start is None else self.start[rows],
                            self.target_psi[rows], self.weights[rows])

    def __len__(self):
        return self.flat.size


def _sorted(arr, ncols):
    if not len(arr):
        return arr
    keys = tuple(arr[:, c] for c in reversed(range(ncols)))
    return arr[np.lexsort(keys)]


def index_targets(targets, n, start_year, n_years, cfg):
    """Gather indices into stacked stocks, OD flows and net migration.

    Rows are put in a canonical order so the loss does not depend on how the
    targets were stored.
    """
    sd = _sorted(targets.stock_diffs, 4)
    fl = _sorted(targets.flows, 3)
    nm = _sorted(targets.net_migration, 2)
    targets.validate(n, range(start_year, start_year + n_years + 1))
    for arr, last in ((fl, n_years - 1), (nm, n_years - 1)):
        if len(arr) and (arr[:, 0].max() - start_year > last or arr[:, 0].min() < start_year):
            raise StructuralError("target year outside the rollout window")
    y0 = sd[:, 0].astype(int) - start_year
    y1 = sd[:, 1].astype(int) - start_year
    cell = sd[:, 2].astype(int) * n + sd[:, 3].astype(int)
    stock = _TargetIndex(y1 * n * n + cell, y0 * n * n + cell, psi(sd[:, 4], cfg.lam_stock), sd[:, 5].copy())
    t = fl[:, 0].astype(int) - start_year
    flow = _TargetIndex(t * n * n + fl[:, 1].astype(int) * n + fl[:, 2].astype(int), None,
                        psi(fl[:, 3], cfg.lam_flow), fl[:, 4].copy())
    t = nm[:, 0].astype(int) - start_year
    net = _TargetIndex(t * n + nm[:, 1].astype(int), None, psi(nm[:, 2], cfg.lam_net), nm[:, 3].copy())
    return stock, net, flow


def _term(source, idx, lam):
    if not len(idx):
        return ad.Tensor(np.array(0.0))
    pred = ad.take_flat(source, idx.flat)
    if idx.start is not None:
        pred = pred - ad.take_flat(source, idx.start)
    r = ad.psi(pred, lam) - idx.target_psi
    return ad.tsum(r * r * idx.weights) * (1.0 / len(idx))


def _loss_graph(g, stock, net, flow, cfg):
    terms = (_term(g.stocks, stock, cfg.lam_stock), _term(g.net, net, cfg.lam_net), _term(g.od, flow, cfg.lam_flow))
    return terms[0] + terms[1] + terms[2], terms


def compute_loss(result, targets, config=None):
    """Weighted loss of a rollout against ``targets``."""
    cfg = config or TrainConfig()
    if targets.size == 0:
        raise EstimationError("empty target set")
    n = result.stocks.shape[1]
    stock, net, flow = index_targets(targets, n, result.start_year, result.flows.shape[0], cfg)
    g = _Graph(ad.Tensor(result.stocks), ad.Tensor(result.od_flows), ad.Tensor(result.net_migration), [], 0, 0)
    _, terms = _loss_graph(g, stock, net, flow, cfg)
    return LossBreakdown(*(float(t.data) for t in terms))


def train_test_split(corridors, fraction, seed):
    """Boolean mask of test corridors, exactly ``round(fraction * n)`` of them.

    ``corridors`` is either ``N`` (all off-diagonal pairs) or a boolean
    ``(N, N)`` mask of eligible corridors.
    """
    if not 0 < fraction < 1:
        raise StructuralError("fraction must lie in (0, 1)")
    if np.isscalar(corridors):
        eligible = ~np.eye(int(corridors), dtype=bool)
    else:
        eligible = np.asarray(corridors, dtype=bool)
    cells = np.flatnonzero(eligible)
    if cells.size < 2:
        raise EstimationError("need at least two corridors to split")
    rng = np.random.default_rng(seed)
    n_test = int(round(fraction * cells.size))
    test = np.zeros(eligible.size, dtype=bool)
    test[rng.permutation(cells)[:n_test]] = True
    return test.reshape(eligible.shape)


@dataclass
class TrainResult:
    params: NetworkParameters
    history: list
    clamped_cells: list = field(default_factory=list)
    config: TrainConfig | None = None

    def history_array(self):
        return np.array([h.row(e) for e, h in enumerate(self.history)], dtype=float).reshape(-1, 5)


def initial_output_bias(targets, n, cap=30.0):
    """Log of a typical per-cohort flow implied by the targets.

    Observed corridor flows are split evenly over the ``n`` birth cohorts;
    without flow targets the typical stock change stands in. Starting the
    network at this scale instead of ``T = 1`` saves thousands of epochs.
    """
    flows = targets.flows[:, 3]
    flows = flows[flows > 0]
    if flows.size:
        scale = np.median(flows) / n
    else:
        diffs = np.abs(targets.stock_diffs[:, 4])
        diffs = diffs[diffs > 0]
        if not diffs.size:
            return 0.0
        scale = np.median(diffs)
    return float(np.clip(np.log(scale), -10.0, cap))


def with_output_bias(params, value):
    biases = list(params.biases)
    last = np.array(biases[-1], dtype=float)
    last[0] = value
    biases[-1] = last
    return NetworkParameters(params.arch, params.weights, tuple(biases))


def train(config, targets, design, rates, initial_stocks, arch=None, params=None, callback=None):
    """Fit network parameters by Adam on the weighted loss.

    Each epoch shuffles the training targets into batches; every batch
    triggers a full rollout with only the batch's entries in the loss.
    ``history`` holds one entry per epoch: the mean of that epoch's batch
    losses, each measured before the batch's update. With a single batch
    this is the full training loss at the start of the epoch.
    """
    if arch is None:
        arch = Architecture(design.input_dim)
    if arch.input_dim != design.input_dim:
        raise StructuralError(f"architecture expects {arch.input_dim} covariates, design has {design.input_dim}")
    train_targets = targets.training_subset()
    if params is None:
        params = init_params(arch, config.seed)
        if config.init_output_bias:
            params = with_output_bias(params, initial_output_bias(train_targets, design.n, config.log_flow_cap))
    if train_targets.size == 0:
        raise EstimationError("empty target set")
    initial = np.asarray(getattr(initial_stocks, "values", initial_stocks), dtype=float)
    years = design.years
    n = design.n
    stock, net, flow = index_targets(train_targets, n, years[0], len(years), config)
    sizes = np.array([len(stock), len(net), len(flow)])
    total = int(sizes.sum())
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng([config.seed, 1])
    dtype = DTYPES[config.dtype]
    design = design.astype(dtype)
    state = AdamState(lr=config.learning_rate)
    arrays = [np.array(a) for a in params.arrays()]
    history, clamp_log = [], []
    batch = config.batch_size or total
    for epoch in range(config.epochs):
        state.lr = config.learning_rate_at(epoch)
        order = rng.permutation(total) if batch < total else np.arange(total)
        epoch_losses = []
        for start in range(0, total, batch):
            rows = np.sort(order[start:start + batch])
            parts = [idx.take(rows[(rows >= lo) & (rows < hi)] - lo)
                     for idx, lo, hi in zip((stock, net, flow), bounds[:-1], bounds[1:])]
            leaves, tensors = param_leaves(NetworkParameters.from_arrays(arch, arrays), dtype)
            g = _simulate(arch, tensors, design, rates, initial, years, config)
            loss, terms = _loss_graph(g, *parts, config)
            if not np.isfinite(loss.data):
                raise RunError(f"non-finite loss in epoch {epoch}")
            ad.backward(loss)
            grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
            arrays = optimizer_step(state, arrays, grads)
            epoch_losses.append([float(t.data) for t in terms])
            clamp_log.append(g.clamped)
        history.append(LossBreakdown(*np.mean(epoch_losses, axis=0)))
        if callback is not None:
            callback(epoch, history[-1])
    return TrainResult(NetworkParameters.from_arrays(arch, arrays), history, clamp_log, config)


@dataclass
class MemberOutcome:
    seed: int
    result: TrainResult | None = None
    error: str | None = None


def train_ensemble(config, members, seed_base, targets, design, rates, initial_stocks, arch=None):
    """Train ``members`` networks with seeds ``seed_base + m``; failures are kept per member."""
    if members < 1:
        raise StructuralError("ensemble needs at least one member")
    out = []
    for m in range(members):
        cfg = replace(config, seed=seed_base + m)
        try:
            out.append(MemberOutcome(cfg.seed, train(cfg, targets, design, rates, initial_stocks, arch)))
        except (MigflowError, FloatingPointError) as exc:
            log.warning("ensemble member %d failed: %s", m, exc)
            out.append(MemberOutcome(cfg.seed, error=str(exc)))
    return out
