import numpy as np
import pytest

from migflow import covariates as cov
from migflow.domain import StockTable, stock_step
from migflow.errors import DomainError, IngestionError, StructuralError
from migflow.network import Architecture
from migflow.synthetic import (
    CorruptionSpec,
    WorldSpec,
    _choose,
    _noisy,
    corrupt_observations,
    evaluate_recovery,
    generate,
    random_panel,
    sweep,
    sweep_points,
)
from migflow.training import TrainConfig, rollout, train

SMALL = WorldSpec(n_countries=5, n_years=4)


@pytest.fixture(scope="module")
def world():
    return generate(SMALL, seed=1)


# --- generation --------------------------------------------------------------

def test_zero_coefficients_give_constant_flows():
    w = generate(SMALL, seed=0, alpha=np.zeros(generate(SMALL, seed=0).design.input_dim))
    edges = w.design.edges
    for t in range(SMALL.n_years):
        np.testing.assert_array_equal(w.flows[t][edges], 100.0)
        assert w.flows[t].sum() == pytest.approx(100.0 * len(edges[0]))


def test_same_seed_same_world(world):
    again = generate(SMALL, seed=1)
    np.testing.assert_array_equal(again.flows, world.flows)
    np.testing.assert_array_equal(again.stocks, world.stocks)
    np.testing.assert_array_equal(again.alpha, world.alpha)
    assert not np.array_equal(generate(SMALL, seed=2).flows, world.flows)


def test_stocks_follow_the_flows(world):
    for t, year in enumerate(world.years):
        nxt = stock_step(StockTable(world.stocks[t], year), world.flows[t], world.rates, year).values
        np.testing.assert_allclose(world.stocks[t + 1], nxt, rtol=1e-9, atol=0)


def test_flows_are_positive_on_edges_only(world):
    mask = np.zeros(world.flows.shape[1:], bool)
    mask[world.design.edges] = True
    assert np.all(world.flows[:, mask] > 0)
    assert np.all(world.flows[:, ~mask] == 0)
    assert np.all((world.alpha >= 0) & (world.alpha <= 0.5))


def test_generation_errors():
    with pytest.raises(DomainError):
        generate(SMALL, seed=0, alpha=np.zeros(3))
    tables = random_panel(5, 4, np.random.default_rng(0))
    del tables["population"]
    with pytest.raises(IngestionError):
        generate(SMALL, tables=tables)


# --- corruption --------------------------------------------------------------

def test_clean_corruption_reproduces_truth(world):
    obs = corrupt_observations(world, CorruptionSpec.clean())
    tg = obs.targets
    n, years = world.n, world.years
    assert tg.test_corridors is None
    assert len(tg.flows) == len(years) * n * (n - 1)
    od = world.od_flows()
    for year, j, k, value, _, _ in tg.flows:
        assert value == od[years.index(int(year)), int(j), int(k)]
    net = world.net_migration()
    assert len(tg.net_migration) == len(years) * n
    for year, j, value, _ in tg.net_migration:
        assert value == net[years.index(int(year)), int(j)]
    # consecutive stock differences for every cell
    assert len(tg.stock_diffs) == len(years) * n * n
    sy = world.stock_years
    for y1, y2, i, j, value, _ in tg.stock_diffs:
        a, b = sy.index(int(y1)), sy.index(int(y2))
        assert b == a + 1
        assert value == pytest.approx(world.stocks[b, int(i), int(j)] - world.stocks[a, int(i), int(j)], abs=1e-9)
    np.testing.assert_array_equal(obs.initial_stocks.values, world.stocks[0])


def test_corridor_mask_counts():
    rng = np.random.default_rng(0)
    assert _choose(870, 0.8, rng).sum() == 174
    w = generate(WorldSpec(n_countries=30, n_years=2), seed=0)
    obs = corrupt_observations(w, CorruptionSpec())
    corridors = {(int(j), int(k)) for _, j, k, *_ in obs.targets.flows}
    assert len(corridors) == 174
    assert obs.targets.test_corridors.sum() == 870 - 174
    assert not any(obs.targets.test_corridors[j, k] for j, k in corridors)
    assert len({int(j) for _, j, *_ in obs.targets.net_migration}) == 6
    assert obs.stocks.observed.sum() == round(0.9 * w.stocks.size)


def test_noise_level_matches_spec():
    rel = _noisy(np.ones(10_000), 0.2, np.random.default_rng(3)) - 1.0
    assert abs(rel.std() / 0.2 - 1.0) < 0.1
    assert abs(rel.mean()) < 0.01


def test_masking_without_noise_preserves_values(world):
    spec = CorruptionSpec(0.0, 0.0, 0.0, 0.5, 0.5, 0.3, seed=4)
    obs = corrupt_observations(world, spec)
    seen = obs.stocks.observed
    np.testing.assert_array_equal(obs.stocks.values[seen], world.stocks[seen])
    assert np.all(np.isnan(obs.stocks.values[~seen]))
    od = world.od_flows()
    for year, j, k, value, _, _ in obs.targets.flows:
        assert value == od[world.years.index(int(year)), int(j), int(k)]


def test_corruption_is_deterministic(world):
    a = corrupt_observations(world, CorruptionSpec(seed=7)).targets
    b = corrupt_observations(world, CorruptionSpec(seed=7)).targets
    c = corrupt_observations(world, CorruptionSpec(seed=8)).targets
    np.testing.assert_array_equal(a.flows, b.flows)
    np.testing.assert_array_equal(a.stock_diffs, b.stock_diffs)
    assert not np.array_equal(a.flows, c.flows)


def test_corruption_spec_validation():
    with pytest.raises(DomainError):
        CorruptionSpec(stock_noise=-0.1)
    with pytest.raises(DomainError):
        CorruptionSpec(flow_mask=1.0)


# --- recovery metrics --------------------------------------------------------

def test_perfect_and_scaled_recovery(world):
    test = np.zeros((world.n, world.n), bool)
    test[0, 1] = test[2, 3] = True
    perfect = evaluate_recovery(world.flows, world, test)
    assert perfect["median_relative_error"] == 0.0
    for key in ("pearson_r", "all_corridor_r", "train_corridor_r", "test_corridor_r", "test_pooled_r"):
        assert perfect[key] == pytest.approx(1.0)
    scaled = evaluate_recovery(1.1 * world.flows, world)
    assert scaled["median_relative_error"] == pytest.approx(0.1)
    assert scaled["pearson_r"] == pytest.approx(1.0)
    with pytest.raises(DomainError):
        evaluate_recovery(world.flows[:2], world)


def test_random_estimates_have_centered_corridor_correlations():
    rng = np.random.default_rng(0)
    truth = rng.uniform(1, 10, (20, 8, 8, 8))
    est = rng.uniform(1, 10, truth.shape)
    metrics = evaluate_recovery(est, truth)
    # 56 corridors, each R with sd about 1/sqrt(19)
    assert abs(metrics["all_corridor_r"]) < 0.1


# --- sweeps ------------------------------------------------------------------

def test_sweep_points_order_and_validation():
    pts = sweep_points({"lam": [0.5, 0.7], "depth": [2]})
    assert pts == [{"depth": 2, "lam": 0.5}, {"depth": 2, "lam": 0.7}]
    with pytest.raises(StructuralError):
        sweep_points({"dropout": [0.1]})


def test_single_point_sweep_equals_train_and_evaluate(world):
    obs = corrupt_observations(world, CorruptionSpec(seed=1))
    cfg = TrainConfig(epochs=20, seed=3)
    arch = {"latent_dim": 2, "depth": 2, "width": 6}
    rows = sweep(world, obs, {"activation": ["tanh"]}, cfg, arch)
    assert len(rows) == 1 and rows[0]["status"] == "ok"

    tr, st = cov.fit_pipeline(world.tables, obs.initial_stocks.values)
    design = cov.build_design(world.n, world.years, world.tables, tr, st)
    net = Architecture(design.input_dim, activation="tanh", **arch)
    result = train(cfg, obs.targets, design, world.rates, obs.initial_stocks, net)
    est = rollout(result.params, obs.initial_stocks, design, world.rates, config=cfg)
    expected = evaluate_recovery(est.flows, world, obs.targets.test_corridors)
    for key, value in expected.items():
        assert rows[0][key] == value
    assert rows[0]["final_loss"] == result.history[-1].total
    assert sweep(world, obs, {"activation": ["tanh"]}, cfg, arch) == rows


def test_failing_sweep_point_is_recorded(world):
    obs = corrupt_observations(world, CorruptionSpec(seed=1))
    rows = sweep(world, obs, {"width": [0, 4]}, TrainConfig(epochs=2),
                 {"latent_dim": 1, "depth": 1})
    assert len(rows) == 2
    assert rows[0]["status"].startswith("failed")
    assert rows[1]["status"] == "ok"
