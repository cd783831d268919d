import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migflow import covariates as cov
from migflow.errors import DomainError, IngestionError, StructuralError
from migflow.synthetic import random_panel
from migflow.transform import psi
from migflow.workflow import pipeline_from_dict

YEARS = [2000, 2001, 2002]


def _panel(n=5, seed=0):
    tables = random_panel(n, len(YEARS), np.random.default_rng(seed))
    stocks = np.random.default_rng(seed + 1).lognormal(5, 2, (n, n))
    transforms, stock_tr = cov.fit_pipeline(tables, stocks)
    return tables, stocks, cov.build_design(n, YEARS, tables, transforms, stock_tr)


def _edge_row(design, i, j, k):
    a, b, c = design.edges
    return int(np.flatnonzero((a == i) & (b == j) & (c == k))[0])


# --- gap filling -------------------------------------------------------------

def test_gdp_growth_cases():
    assert cov.gdp_growth([100, 110])[1] == pytest.approx(10.0)
    assert np.all(cov.gdp_growth([5.0, 5.0, 5.0])[1:] == 0.0)
    assert cov.gdp_growth([110, 100])[1] == pytest.approx(-9.0909090909, rel=1e-9)
    assert np.isnan(cov.gdp_growth([1.0, 2.0])[0])
    with pytest.raises(DomainError):
        cov.gdp_growth([0.0, 1.0])


def test_deflate_cases():
    assert cov.deflate(110.0, 1.1) == pytest.approx(100.0)
    np.testing.assert_array_equal(cov.deflate([3.0, 4.0], 1.0), [3.0, 4.0])
    real = np.array([1.5, 20.0, 300.0])
    deflator = np.array([0.7, 1.3, 2.9])
    np.testing.assert_allclose(cov.deflate(real * deflator, deflator), real, rtol=1e-15)
    with pytest.raises(DomainError):
        cov.deflate(1.0, 0.0)


def test_extrapolate_zero_growth_is_constant():
    out = cov.extrapolate_by_growth([np.nan, 7.0, np.nan, np.nan], np.zeros(4), 1)
    np.testing.assert_array_equal(out, [7.0, 7.0, 7.0, 7.0])


def test_extrapolate_one_step_back():
    out = cov.extrapolate_by_growth([np.nan, 100.0], [np.nan, 10.0], 1, direction="backward")
    assert out[0] == pytest.approx(90.909090909, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e6), st.lists(st.floats(-90, 300), min_size=5, max_size=5))
def test_extrapolate_forward_then_backward(anchor, growth):
    g = np.array([np.nan] + growth)
    fwd = cov.extrapolate_by_growth([anchor] + [np.nan] * 5, g, 0, direction="forward")
    back = cov.extrapolate_by_growth([np.nan] * 5 + [fwd[-1]], g, 5, direction="backward")
    assert back[0] == pytest.approx(anchor, rel=1e-12)


def test_extrapolate_rejects_total_collapse():
    with pytest.raises(DomainError):
        cov.extrapolate_by_growth([1.0, np.nan], [np.nan, -100.0], 0)


def test_backfill_trade_cases():
    full = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(cov.backfill_trade(full, np.ones(3), np.ones(3)), full)
    np.testing.assert_array_equal(cov.backfill_trade([np.nan] * 3), np.zeros(3))
    out = cov.backfill_trade([np.nan, 115.0, np.nan, 130.0], [np.nan, 10.0, 0.0, 0.0], [np.nan, 20.0, 0.0, 0.0])
    np.testing.assert_allclose(out, [100.0, 115.0, 115.0, 130.0])
    single = cov.backfill_trade([np.nan, 110.0], [np.nan, 10.0])
    assert single[0] == pytest.approx(100.0)


def test_religious_similarity_and_distance():
    shares = np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])
    sim = cov.religious_similarity(shares, other_column=2)
    np.testing.assert_allclose(sim, [[0.34, 0.08], [0.08, 0.02]])
    d = np.array([[[0, 10], [10, 0]], [[0, np.nan], [np.nan, 0]], [[0, 20], [20, 0]]], dtype=float)
    np.testing.assert_allclose(cov.mean_distance(d), [[0, 15], [15, 0]])


# --- tables ------------------------------------------------------------------

def test_table_validation():
    with pytest.raises(DomainError):
        cov.CovariateTable("eu", np.full((2, 3), 0.5), cov.COUNTRY, binary=True)
    with pytest.raises(StructuralError):
        cov.CovariateTable("trade", np.ones((2, 3)), cov.PAIR)


def test_unknown_or_incomplete_covariates_are_rejected():
    tables, stocks, design = _panel()
    bad = dict(tables, mystery=cov.CovariateTable("mystery", np.ones((3, 5))))
    with pytest.raises(IngestionError):
        cov.build_design(5, YEARS, bad, design.transforms, design.stock_transform)
    gap = np.array(tables["population"].values)
    gap[1, 2] = np.nan
    holes = dict(tables, population=cov.CovariateTable("population", gap))
    with pytest.raises(IngestionError, match="population"):
        cov.build_design(5, YEARS, holes, design.transforms, design.stock_transform)
    with pytest.raises(IngestionError, match="2010"):
        cov.build_edge_covariates(5, YEARS, 2010, tables, stocks, design.transforms, design.stock_transform)


# --- edge vectors ------------------------------------------------------------

def test_edge_index_excludes_stayers():
    i, j, k = cov.edge_index(4)
    assert i.size == 4 * 4 * 3
    assert np.all(j != k)
    assert list(zip(i, j, k)) == sorted(zip(i, j, k))


def test_kronecker_components():
    _, stocks, design = _panel()
    X = design.features(2000, stocks)
    bo = design.slots.index(("native_origin", "BO"))
    bd = design.slots.index(("native_destination", "BD"))
    i, j, k = design.edges
    np.testing.assert_array_equal(X[:, bo], (i == j).astype(float))
    np.testing.assert_array_equal(X[:, bd], (i == k).astype(float))


def test_destination_change_touches_only_destination_components():
    _, stocks, design = _panel()
    X = design.features(2001, stocks)
    a, b = X[_edge_row(design, 0, 1, 2)], X[_edge_row(design, 0, 1, 3)]
    changed = np.flatnonzero(a != b)
    d_slots = {c for c, (_, pattern) in enumerate(design.slots) if "D" in pattern}
    assert set(changed) <= d_slots
    # destination-indexed continuous components carry different raw values here
    assert len(changed) >= 5


def test_zero_raw_values_map_to_negative_mean_over_std():
    _, stocks, design = _panel()
    for name, pattern in design.slots:
        tr = design.transforms.get(cov.slot_key(name, pattern))
        if tr is None:
            continue
        s = tr.standardizer
        got = tr.apply(np.zeros(1))[0]
        # psi maps 0 to 0 for every lambda
        assert got == pytest.approx(-s.mean / s.std, rel=1e-12)


def test_binary_components_bypass_transforms():
    tables, stocks, design = _panel()
    X = design.features(2000, stocks)
    i, j, k = design.edges
    for name, pattern in design.slots:
        if name not in ("eu", "colony"):
            continue
        c = design.slots.index((name, pattern))
        assert set(np.unique(X[:, c])) <= {0.0, 1.0}
        assert cov.slot_key(name, pattern) not in design.transforms
        raw = cov.slot_values(tables, name, pattern, design.edges)[0]
        np.testing.assert_array_equal(X[:, c], raw)


def test_stock_components_follow_the_stock_table():
    _, stocks, design = _panel()
    X = design.features(2002, stocks)
    i, j, k = design.edges
    tr = design.stock_transform
    expected = (psi(stocks, tr.lam) - tr.standardizer.mean) / tr.standardizer.std
    np.testing.assert_allclose(X[:, -2], expected[i, j], rtol=1e-12)
    np.testing.assert_allclose(X[:, -1], expected[i, k], rtol=1e-12)
    assert design.slots[-2:] == list(cov.STOCK_SLOTS)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_continuous_components_are_standardised_over_edges(seed):
    _, _, design = _panel(n=8, seed=seed)
    for c in design.continuous_slots():
        if c >= design.static_dim:
            continue
        x = design.static[:, :, c].ravel()
        assert abs(x.mean()) < 0.05
        assert 0.8 <= x.std() <= 1.2


def test_layout_is_stable_across_runs_and_years():
    t1, s1, d1 = _panel(seed=3)
    t2, s2, d2 = _panel(seed=4)
    assert d1.slots == d2.slots and d1.layout_hash() == d2.layout_hash()
    dims = {d1.features(y, s1).shape for y in YEARS}
    assert dims == {(d1.n_edges, d1.input_dim)}
    missing = dict(t1)
    del missing["trade"]
    tr, st_ = cov.fit_pipeline(missing, s1)
    d3 = cov.build_design(5, YEARS, missing, tr, st_)
    assert d3.layout_hash() != d1.layout_hash()
    assert ("trade", "OD") not in d3.slots


def test_single_year_vectors_match_design():
    tables, stocks, design = _panel()
    X, edges = cov.build_edge_covariates(5, YEARS, 2001, tables, stocks, design.transforms,
                                         design.stock_transform)
    np.testing.assert_array_equal(X, design.features(2001, stocks))
    for a, b in zip(edges, design.edges):
        np.testing.assert_array_equal(a, b)


def test_pipeline_round_trip_reproduces_features():
    tables, stocks, design = _panel()
    transforms, stock_tr, slots = pipeline_from_dict(design.pipeline_dict())
    again = cov.build_design(5, YEARS, tables, transforms, stock_tr)
    assert slots == design.slots
    np.testing.assert_array_equal(again.features(2000, stocks), design.features(2000, stocks))


def test_slot_derivatives_match_finite_differences():
    _, stocks, design = _panel()
    year = 2001
    D = design.slot_derivatives(year, stocks)
    raw = design.raw_features(year, stocks)
    for c, (name, pattern) in enumerate(design.slots):
        tr = design.stock_transform if c >= design.static_dim else design.transforms.get(cov.slot_key(name, pattern))
        if tr is None:
            assert np.all(D[:, c] == 0.0)
            continue
        x = raw[:, c]
        h = 1e-6 * np.maximum(np.abs(x), 1.0)
        fd = (tr.apply(x + h) - tr.apply(x - h)) / (2 * h)
        np.testing.assert_allclose(D[:, c], fd, rtol=1e-5, atol=1e-9)


def test_subset_keeps_matching_rows():
    _, stocks, design = _panel()
    mask = np.zeros((5, 5, 5), bool)
    mask[1, :, 3] = True
    sub = design.subset(mask)
    assert sub.n_edges == 4
    rows = [_edge_row(design, 1, j, 3) for j in range(5) if j != 3]
    np.testing.assert_array_equal(sub.features(2000, stocks), design.features(2000, stocks)[rows])
