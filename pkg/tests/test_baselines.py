import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_rates
from migflow.baselines import (
    MEASURES,
    aggregate_windows,
    comparison_metrics,
    demographic_accounting_flows,
    pearson,
    stock_diff_drop,
    stock_diff_reverse,
    tensor_measures,
)
from migflow.domain import StockTable, stock_step
from migflow.errors import StructuralError


def _tables(before, after):
    return StockTable(np.asarray(before, float), 2000), StockTable(np.asarray(after, float), 2005)


# --- stock differencing ------------------------------------------------------

def test_drop_cases():
    S = np.array([[50.0, 20.0], [30.0, 60.0]])
    assert np.all(stock_diff_drop(*_tables(S, S)).od == 0)
    up = S.copy()
    up[0, 1] += 10
    flows = stock_diff_drop(*_tables(S, up))
    expected = np.zeros((2, 2))
    expected[0, 1] = 10.0
    np.testing.assert_array_equal(flows.birth_destination, expected)
    down = S.copy()
    down[0, 1] -= 10
    assert np.all(stock_diff_drop(*_tables(S, down)).od == 0)


def test_reverse_cases():
    S = np.array([[50.0, 20.0], [30.0, 60.0]])
    up = S.copy()
    up[1, 0] += 10
    assert stock_diff_reverse(*_tables(S, up)).od[1, 0] == 10.0
    down = S.copy()
    down[0, 1] -= 10
    flows = stock_diff_reverse(*_tables(S, down))
    # 0-born people living in 1 went home: a move from 1 to 0
    assert flows.od[1, 0] == 10.0 and flows.od[0, 1] == 0.0
    assert flows.birth_destination[0, 0] == 10.0


def test_reverse_matches_brute_force_sign_split(rng):
    S1 = rng.uniform(10, 100, (3, 3))
    S2 = S1 + rng.choice([-1.0, 1.0], (3, 3)) * rng.uniform(1, 9, (3, 3))
    flows = stock_diff_reverse(*_tables(S1, S2))
    od = np.zeros((3, 3))
    bd = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            d = S2[i, j] - S1[i, j]
            if d > 0:
                od[i, j] += d
                bd[i, j] += d
            else:
                od[j, i] += -d
                bd[i, i] += -d
    np.testing.assert_allclose(flows.od, od, rtol=1e-15)
    np.testing.assert_allclose(flows.birth_destination, bd, rtol=1e-15)
    m = flows.measures()
    np.testing.assert_allclose(m["net"], m["inflow"] - m["outflow"])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1e5)), arrays(np.float64, (4, 4), elements=st.floats(0, 1e5)))
def test_drop_and_reverse_agree_on_growth(S1, S2):
    a = stock_diff_drop(*_tables(S1, S2)).birth_destination
    b = stock_diff_reverse(*_tables(S1, S2)).birth_destination
    grew = (S2 > S1) & ~np.eye(4, dtype=bool)
    np.testing.assert_array_equal(a[grew], b[grew])
    assert np.all(a >= 0) and np.all(b >= 0)


def test_shape_mismatch():
    with pytest.raises(StructuralError):
        stock_diff_drop(np.ones((2, 2)), np.ones((3, 3)))


# --- demographic accounting --------------------------------------------------

def _simulate(S1, T, rates):
    return stock_step(StockTable(S1, 2000), T, rates, 2000)


def _net_effect(T):
    return T.sum(axis=1) - T.sum(axis=2)


def test_closed_pair_has_no_flows():
    S1 = np.array([[80.0, 5.0], [7.0, 90.0]])
    rates = make_rates(2, (2000, 2000), births=[3.0, 2.0], gamma=[0.01, 0.02])
    S2 = _simulate(S1, np.zeros((2, 2, 2)), rates)
    out = demographic_accounting_flows(StockTable(S1, 2000), S2, rates)
    np.testing.assert_allclose(out.flows.values, 0.0, atol=1e-8)


def test_two_country_single_move_is_recovered():
    S1 = np.array([[80.0, 20.0], [7.0, 90.0]])
    rates = make_rates(2, (2000, 2000), births=[3.0, 2.0], gamma=[0.01, 0.02])
    T = np.zeros((2, 2, 2))
    T[0, 1, 0] = 5.0  # five 0-born people return from 1 to 0
    S2 = _simulate(S1, T, rates)
    out = demographic_accounting_flows(StockTable(S1, 2000), S2, rates)
    np.testing.assert_allclose(_net_effect(out.flows.values), _net_effect(T), atol=1e-8)
    np.testing.assert_allclose(out.flows.values, T, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_random_forward_simulation_is_reproduced(seed):
    rng = np.random.default_rng(seed)
    n = 4
    S1 = rng.uniform(200, 2000, (n, n))
    rates = make_rates(n, (2000, 2000), births=rng.uniform(5, 50, n), gamma=rng.uniform(0.005, 0.02, n))
    T = rng.uniform(0, 20, (n, n, n))
    for i in range(n):
        np.fill_diagonal(T[i], 0.0)
    S2 = _simulate(S1, T, rates)
    out = demographic_accounting_flows(StockTable(S1, 2000), S2, rates)
    est = out.flows.values
    np.testing.assert_allclose(out.balanced, S2.values, rtol=1e-9)
    np.testing.assert_allclose(_net_effect(est), out.balanced - out.projected, atol=1e-6)
    assert np.all(est >= 0)
    assert np.all(np.diagonal(est, axis1=1, axis2=2) == 0)
    # minimum movement never moves more people than the true flows did
    assert est.sum() <= T.sum() + 1e-6


def test_accounting_flows_are_birth_consistent():
    rng = np.random.default_rng(9)
    S1 = rng.uniform(100, 1000, (3, 3))
    S2 = rng.uniform(100, 1000, (3, 3))
    rates = make_rates(3, (2000, 2004), births=rng.uniform(5, 20, 3), gamma=0.01)
    out = demographic_accounting_flows(StockTable(S1, 2000), StockTable(S2, 2005), rates)
    est = out.flows.values
    # cohort i only moves between residences where its own stock changed
    for i in range(3):
        delta = out.balanced[i] - out.projected[i]
        np.testing.assert_allclose(_net_effect(est)[i], delta, atol=1e-6 * np.abs(delta).max())
        senders = est[i].sum(axis=1) > 0
        assert np.all(delta[senders] < 0)
    assert "minimum movement" in out.label


# --- correlation scoring -----------------------------------------------------

def test_pearson_cases(rng):
    x = rng.normal(size=50)
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, 2 * x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert np.isnan(pearson([1.0, 2.0], [1.0, 2.0]))
    assert np.isnan(pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    assert pearson([1.0, np.nan, 2.0, 3.0], [2.0, 5.0, 4.0, 6.0]) == pytest.approx(1.0)


def test_pearson_unrelated_series_are_weakly_correlated():
    hits = 0
    for seed in range(200):
        r = np.random.default_rng(seed)
        hits += abs(pearson(r.normal(size=100), r.normal(size=100))) < 0.3
    # P(|R| >= 0.3) is about 0.002 for n = 100
    assert hits >= 197


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)),
       st.floats(0.01, 100), st.floats(-1e3, 1e3))
def test_pearson_affine_invariance(a, b, scale, shift):
    assume(np.ptp(a) > 1e-3 and np.ptp(b) > 1e-3)
    r = pearson(a, b)
    assert -1 <= r <= 1
    assert pearson(scale * a + shift, b) == pytest.approx(r, abs=1e-6)


def test_window_aggregation():
    annual = np.arange(7 * 2).reshape(7, 2).astype(float)
    windows = aggregate_windows(annual, 3)
    assert len(windows) == 2
    np.testing.assert_array_equal(windows[0], annual[:3].sum(axis=0))
    np.testing.assert_array_equal(windows[1], annual[3:6].sum(axis=0))


def test_comparison_identity_and_scale(rng):
    T = [rng.uniform(0, 10, (4, 4, 4)) for _ in range(3)]
    ref = [tensor_measures(t) for t in T]
    same = comparison_metrics(ref, ref, "copy")
    doubled = comparison_metrics([tensor_measures(2 * t) for t in T], ref, "double")
    for key in MEASURES:
        assert same.values[key] == pytest.approx(1.0)
        assert doubled.values[key] == pytest.approx(1.0)
    assert doubled.row()[0] == "double"


def test_comparison_missing_measures_are_nan():
    est = [{"od": np.ones((3, 3)) * np.arange(3)}]
    ref = [{"od": np.ones((3, 3)) * np.arange(3), "net": np.zeros(3)}]
    report = comparison_metrics(est, ref)
    assert np.isnan(report.values["net"]) and np.isnan(report.values["inflow"])
    with pytest.raises(StructuralError):
        comparison_metrics(est, ref * 2)
