import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from migflow.domain import (
    ClampCounter,
    CountryRegistry,
    FlowTensor,
    StockTable,
    TimeAxis,
    flows_by_origin,
    net_migration,
    stock_step,
)
from migflow.errors import DomainError, StructuralError

from conftest import make_rates


def test_registry_rejects_duplicates():
    with pytest.raises(StructuralError):
        CountryRegistry(("A", "B", "A"))
    reg = CountryRegistry(("A", "B"))
    assert reg.index("B") == 1
    with pytest.raises(StructuralError):
        reg.index("C")


def test_time_axis_order():
    assert TimeAxis(2000, 2002).years == [2000, 2001, 2002]
    with pytest.raises(StructuralError):
        TimeAxis(2003, 2002)


def test_flow_tensor_self_corridors_are_zero():
    T = np.ones((3, 3, 3))
    ft = FlowTensor(T, 2000)
    for j in range(3):
        assert not ft.values[:, j, j].any()
    with pytest.raises(DomainError):
        FlowTensor(-T, 2000)


def test_stock_table_rejects_negative():
    with pytest.raises(DomainError):
        StockTable(np.array([[1.0, -1.0], [0.0, 1.0]]), 2000)


def test_flows_by_origin_zero_and_single_entry():
    assert not flows_by_origin(np.zeros((3, 3, 3))).values.any()
    T = np.zeros((3, 3, 3))
    T[0, 1, 2] = 5
    F = flows_by_origin(T).values
    expect = np.zeros((3, 3))
    expect[1, 2] = 5
    np.testing.assert_array_equal(F, expect)


def _random_tensor(rng, n):
    T = rng.random((n, n, n))
    for j in range(n):
        T[:, j, j] = 0
    return T


def test_flows_by_origin_matches_triple_loop(rng):
    T = _random_tensor(rng, 4)
    F = flows_by_origin(T).values
    oracle = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            for k in range(4):
                oracle[j, k] += T[i, j, k]
    np.testing.assert_allclose(F, oracle, rtol=1e-15)


def test_net_migration_hand_case():
    mu = net_migration(np.array([[0.0, 2.0], [1.0, 0.0]])).values
    np.testing.assert_array_equal(mu, [-1.0, 1.0])


def test_net_migration_symmetric_is_zero(rng):
    A = rng.random((5, 5))
    F = A + A.T
    np.fill_diagonal(F, 0)
    np.testing.assert_allclose(net_migration(F).values, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_net_migration_sums_to_zero_and_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    T = _random_tensor(rng, n) * 100
    mu = net_migration(flows_by_origin(T)).values
    brute = np.zeros(n)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                brute[k] += T[i, j, k]
                brute[j] -= T[i, j, k]
    np.testing.assert_allclose(mu, brute, atol=1e-9)
    assert abs(mu.sum()) < 1e-9


def test_stock_step_fixed_point():
    S = np.array([[5.0, 1.0], [2.0, 7.0]])
    out = stock_step(S, np.zeros((2, 2, 2)), make_rates(2), 2000).values
    np.testing.assert_array_equal(out, S)


def test_stock_step_births_on_diagonal():
    S = np.array([[5.0, 1.0], [2.0, 7.0]])
    out = stock_step(S, np.zeros((2, 2, 2)), make_rates(2, births=[10, 0]), 2000).values
    np.testing.assert_array_equal(out - S, [[10.0, 0.0], [0.0, 0.0]])


def test_stock_step_hand_case():
    S = np.array([[100.0, 10.0], [5.0, 80.0]])
    T = np.zeros((2, 2, 2))
    T[0, 0, 1] = 3
    out = stock_step(S, T, make_rates(2, gamma=[0.1, 0.0]), 2000).values
    np.testing.assert_allclose(out, [[87.0, 13.0], [4.5, 80.0]], rtol=1e-15)


def test_stock_step_clamps_and_counts():
    S = np.array([[1.0, 0.0], [0.0, 1.0]])
    T = np.zeros((2, 2, 2))
    T[0, 0, 1] = 3
    counter = ClampCounter()
    out = stock_step(S, T, make_rates(2), 2000, counter).values
    assert out[0, 0] == 0.0 and counter.cells == 1


def test_stock_step_dimension_mismatch():
    with pytest.raises(StructuralError):
        stock_step(np.ones((2, 2)), np.zeros((3, 3, 3)), make_rates(2), 2000)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_global_conservation(n, seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(1e3, 1e5, (n, n))
    T = _random_tensor(rng, n) * 10
    B = rng.uniform(0, 100, n)
    g = rng.uniform(0, 0.05, n)
    rates = make_rates(n, births=B, gamma=g)
    out = stock_step(S, T, rates, 2000).values
    expect = S.sum() + B.sum() - (S * g[None, :]).sum()
    assert abs(out.sum() - expect) <= 1e-9 * abs(expect)
