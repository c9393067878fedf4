import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2, skew

from gfagru import backtest as bt
from gfagru import genfactor as gf
from gfagru.data import split
from oracles import chi2_sf_series


def one_violation_path(L, positions):
    v = np.zeros(L, dtype=bool)
    v[list(positions)] = True
    return v


# -- metrics ----------------------------------------------------------------------

def test_metrics_constant_path():
    m = bt.metrics([0.01] * 12)
    assert m.AV == pytest.approx(0.12, abs=1e-15)
    assert m.SD == 0.0
    assert math.isnan(m.IR)
    assert m.MD == 0.0


def test_max_drawdown_examples():
    assert bt.max_drawdown([0.01, 0.02, 0.03]) == 0.0
    assert bt.max_drawdown([-0.1, 0.1]) == pytest.approx(0.1, abs=1e-15)
    # peak 1.1, trough 1.1 * 0.5
    assert bt.max_drawdown([0.1, -0.5, 0.2]) == pytest.approx(0.5, abs=1e-15)


def test_metrics_definitions():
    rng = np.random.default_rng(0)
    R = rng.normal(0.01, 0.05, 103)
    m = bt.metrics(R)
    assert m.AV == pytest.approx(R.mean() * 12)
    assert m.SD == pytest.approx(math.sqrt(R.var(ddof=1) * 12))
    assert m.IR == pytest.approx(m.AV / m.SD)
    assert m.SK == pytest.approx(skew(R, bias=True))
    worst = np.sort(-R)[-math.ceil(0.05 * 103):]
    # six worst losses; the first one is the VaR and carries the fractional weight
    k = math.ceil(0.95 * 103)
    losses = np.sort(-R)
    var = losses[k - 1]
    cvar = var + np.maximum(losses - var, 0).sum() / (0.05 * 103)
    assert m.ES == pytest.approx(cvar * 12)
    assert m.CR == pytest.approx(R.mean() / cvar)
    assert m.RR == pytest.approx(R[-R <= var].mean() / cvar)
    upper = bt.metrics(R, rr_numerator="upper")
    assert upper.RR == pytest.approx(np.sort(R)[-len(worst):].mean() / cvar)
    with pytest.raises(ValueError):
        bt.metrics([0.1])
    with pytest.raises(ValueError):
        bt.metrics(R, rr_numerator="middle")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5), min_size=2, max_size=120))
def test_es_bounds_minus_av(path):
    m = bt.metrics(path)
    assert m.ES >= -m.AV - 1e-12
    assert 0 <= m.MD <= 1


# -- coverage tests ---------------------------------------------------------------

@pytest.mark.parametrize("x,p_pof", [(0, 0.1502), (1, 0.9762), (2, 0.395), (3, 0.1129)])
def test_coverage_anchors(x, p_pof):
    v = one_violation_path(103, np.linspace(10, 90, x).astype(int))
    res = bt.coverage_tests(v, 0.01)
    assert res.violations == x
    assert res.p_pof == pytest.approx(p_pof, abs=5e-3)
    if x == 1:
        assert res.p_cc == pytest.approx(0.9897, abs=5e-3)
    for lr, k, p in ((res.lr_pof, 1, res.p_pof), (res.lr_cci, 1, res.p_cci), (res.lr_pof + res.lr_cci, 2, res.p_cc)):
        assert p == pytest.approx(chi2_sf_series(lr, k), abs=1e-6)


def test_series_oracle_agrees_with_scipy_on_a_grid():
    for k in (1, 2):
        for x in np.linspace(0, 20, 41):
            assert chi2_sf_series(x, k) == pytest.approx(chi2.sf(x, k), abs=1e-9)


def test_coverage_degenerate_counts():
    all_hits = bt.coverage_tests(np.ones(20, bool), 0.05)
    assert all_hits.lr_cci == pytest.approx(0.0, abs=1e-12)
    assert 0 <= all_hits.p_pof < 1e-6
    clustered = bt.coverage_tests(one_violation_path(103, [50, 51, 52]), 0.01)
    spread = bt.coverage_tests(one_violation_path(103, [10, 50, 90]), 0.01)
    assert clustered.p_pof == spread.p_pof
    assert clustered.p_cci < spread.p_cci
    for r in (all_hits, clustered, spread):
        assert all(0 <= p <= 1 for p in (r.p_pof, r.p_cci, r.p_cc))
    with pytest.raises(ValueError):
        bt.coverage_tests([True], 0.01)
    with pytest.raises(ValueError):
        bt.coverage_tests([True, False], 1.0)


# -- VaR forecasts ----------------------------------------------------------------

def unit_model(alpha=0.0, beta=0.6, gamma=0.8, tails=1.0, n_stocks=2):
    return gf.ForecastedFactorModel(
        market=gf.MarketTheta(alpha, 1.0), tail_m=gf.TailParams(tails, tails),
        alpha=[alpha] * n_stocks, beta=[beta] * n_stocks, gamma=[gamma] * n_stocks,
        tail_im=[[tails, tails]] * n_stocks, tail_i=[[tails, tails]] * n_stocks)


def test_var_of_naive_model_is_scaled_gaussian_quantile():
    s = bt.var_forecast_series([unit_model(alpha=0.1)], 0.99, 200_000, 0)
    np.testing.assert_allclose(s.var[0], 1.5 * 2.3263478740 - 0.1, atol=0.03)
    assert s.columns == ("S0", "S1", "MARKET")


def test_var_point_mass_and_determinism():
    m = unit_model(alpha=0.02, beta=1e-4, gamma=1e-4)
    realized = np.array([[0.015, 0.03, 0.0], [0.025, 0.01, 0.05]])
    s = bt.var_forecast_series([m, m], 0.95, 5000, 1, realized)
    np.testing.assert_allclose(s.var[:, :2], -0.02, atol=1e-3)
    np.testing.assert_array_equal(s.violations[:, :2], [[True, False], [False, True]])
    again = bt.var_forecast_series([m, m], 0.95, 5000, 1, realized)
    np.testing.assert_array_equal(s.var, again.var)
    with pytest.raises(ValueError):
        bt.var_forecast_series([m], 0.95, 100, 1, realized)


# -- the engine -------------------------------------------------------------------

def make_data(rows=400, n=3, split_at=250, seed=0):
    rng = np.random.default_rng(seed)
    lm = rng.normal(3e-4, 0.01, rows - 1)
    ls = 0.8 * lm[:, None] + rng.normal(2e-4, 0.01, (rows - 1, n))
    pm = 100 * np.exp(np.concatenate([[0], np.cumsum(lm)]))
    ps = 100 * np.exp(np.vstack([np.zeros((1, n)), np.cumsum(ls, axis=0)]))
    return bt.BacktestData(ps, pm, split(rows, split_at=split_at), tuple(f"S{i}" for i in range(n)))


def test_rebalance_count_for_2163_test_rows():
    sp = split(5634, split_at=3471)
    assert sp.n_test == 2163
    assert sp.rebalance_anchors().shape[0] == 103


def test_equal_weight_strategy():
    data = make_data()
    runs = bt.run_backtest(bt.EqualWeight(), data, [0.01, 0.02], 0.9, 100, repetitions=5)
    assert len(runs) == 1 and runs[0].target is None
    assert runs[0].repetitions == 1
    np.testing.assert_array_equal(runs[0].weights[0], 1 / 3)
    L = data.anchors().shape[0]
    assert L == (400 - 250) // 21
    expected = np.array([data.realized(int(a)).mean() for a in data.anchors()])
    np.testing.assert_allclose(runs[0].returns[0], expected, rtol=1e-14)


def test_infeasible_target_falls_back_to_equal_weights():
    data = make_data()
    runs = bt.run_backtest(bt.StaticSAA(), data, [5.0], 0.9, 100)
    L = data.anchors().shape[0]
    assert runs[0].fallbacks == L
    np.testing.assert_array_equal(runs[0].weights[0], 1 / 3)


def test_ew_target_tracks_history_and_solves():
    data = make_data()
    runs = bt.run_backtest(bt.StaticSAA(), data, ["ew"], 0.9, 100)
    assert runs[0].fallbacks == 0
    w = runs[0].weights[0]
    np.testing.assert_allclose(w.sum(axis=1), 1, atol=1e-10)


def test_stochastic_strategies_reproducible_and_repeated():
    data = make_data()
    fcs = [unit_model(alpha=0.01, beta=0.02, gamma=0.03, tails=1.5, n_stocks=3)] * data.anchors().shape[0]
    a = bt.run_backtest(bt.GfAgru(fcs), data, [0.01, "ew"], 0.9, 300, seed=7, repetitions=3)
    b = bt.run_backtest(bt.GfAgru(fcs), data, [0.01, "ew"], 0.9, 300, seed=7, repetitions=3, workers=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.returns, y.returns)
        np.testing.assert_array_equal(x.weights, y.weights)
    assert a[0].repetitions == 3
    assert np.isfinite(a[0].sd_metrics()[:2]).all()
    c = bt.run_backtest(bt.DccMM(), data, [0.01], 0.9, 300, seed=1, repetitions=2)
    d = bt.run_backtest(bt.DccMM(), data, [0.01], 0.9, 300, seed=1, repetitions=2)
    np.testing.assert_array_equal(c[0].returns, d[0].returns)


def test_forecast_count_must_match_schedule():
    data = make_data()
    with pytest.raises(ValueError):
        bt.run_backtest(bt.GfAgru([unit_model(n_stocks=3)]), data, [0.01], 0.9, 100)


def test_report_rows_layout():
    data = make_data()
    fcs = [unit_model(alpha=0.01, beta=0.02, gamma=0.03, tails=1.5, n_stocks=3)] * data.anchors().shape[0]
    targets = [0.0, 0.005, 0.01, "ew"]
    runs = []
    for s in (bt.EqualWeight(), bt.StaticSAA(), bt.DccMM(), bt.GfAgru(fcs)):
        runs += bt.run_backtest(s, data, targets, 0.9, 200, repetitions=2)
    rows = bt.report_rows(runs)
    assert len(rows) == 13
    assert [r["strategy"] for r in rows].count("EW") == 1
    assert {r["target"] for r in rows if r["strategy"] == "SAA"} == {"0", "0.005", "0.01", "R_ew"}
    gf_row = next(r for r in rows if r["strategy"] == "GF-AGRU")
    assert gf_row["repetitions"] == 2 and not math.isnan(gf_row["AV_sd"])
    assert all(f in rows[0] for f in bt.metric_fields())
