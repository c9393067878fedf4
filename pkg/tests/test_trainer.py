import math

import numpy as np
import pytest
from scipy import optimize
from scipy.stats import norm

from gfagru import data as dp
from gfagru import genfactor as gf
from gfagru import pipeline as pl
from gfagru import trainer as tr

FAST = dict(T=10, n_outer=2, n_tv=60, n_fix=40, eval_every=10, ensemble=1)


@pytest.fixture(scope="module")
def market_data():
    model = dp.synth_truth(2, 11, tails=(2.0, 1.4))
    table = dp.synth_generate(model, 1100, 3)
    md = pl.MarketData.from_table(table)
    sp = dp.split(md.n_rows, 0.75, T=10)
    return md, sp


@pytest.fixture(scope="module")
def market_sets(market_data):
    md, sp = market_data
    return pl.fit_samples(md, sp, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(ablation="other")
    with pytest.raises(ValueError):
        tr.TrainConfig(l_fix=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(tail_init=3.5)
    with pytest.raises(ValueError):
        tr.TrainConfig(T=0)
    assert tr.TrainConfig(ablation="naive").naive
    assert not tr.TrainConfig(ablation="no-attention").use_attention


def test_normalizer_uses_training_rows_only(market_sets):
    train, val = market_sets
    assert len(train) >= 500
    norm = tr.Normalizer.fit(train.X, train.y)
    np.testing.assert_allclose(norm.feat_mean, train.X.mean(axis=(0, 2)))
    assert norm.y_mean == pytest.approx(train.y.mean())
    theta = np.array([[0.5, 2.0]])
    back = norm.denormalize(theta.copy())
    assert back[0, 0] == pytest.approx(norm.y_mean + norm.y_std * 0.5)
    assert back[0, 1] == pytest.approx(norm.y_std * 2.0)


def test_market_fit_improves_validation_and_tail_blocks_are_monotone(market_sets):
    train, val = market_sets
    m = tr.fit_market(train, val, tr.TrainConfig(**FAST), seed=0)
    assert m.trace.accepted_val < m.trace.initial_val
    assert len(m.trace.fix_blocks) == FAST["n_outer"]
    for start, best in m.trace.fix_blocks:
        assert best <= start
    assert m.z_fit.shape == (len(train) + len(val),)
    assert np.isfinite(m.z_fit).all()


def test_tails_are_clamped_to_the_box(market_sets):
    train, val = market_sets
    cfg = tr.TrainConfig(**{**FAST, "l_fix": 0.5, "n_fix": 60})
    m = tr.fit_market(train, val, cfg, seed=1)
    path = np.array(m.trace.tail_path)
    assert path.min() >= 1.0 and path.max() <= 3.0
    assert 1.0 <= m.tail.u <= 3.0 and 1.0 <= m.tail.v <= 3.0


def test_naive_ablation_is_gaussian_with_widened_scale(market_sets):
    train, val = market_sets
    m = tr.fit_market(train, val, tr.TrainConfig(**{**FAST, "ablation": "naive"}), seed=2)
    assert (m.tail.u, m.tail.v) == (1.0, 1.0)
    assert m.trace.fix_blocks == [] and m.trace.tail_path == []
    th = m.predict(val.X)
    expected = -norm.logpdf(val.y, th[:, 0], 1.5 * th[:, 1]).mean()
    assert m.nll(val) == pytest.approx(expected, rel=1e-10)


def test_fit_is_deterministic(market_sets):
    train, val = market_sets
    cfg = tr.TrainConfig(**{**FAST, "n_outer": 1})
    a = tr.fit_market(train, val, cfg, seed=5)
    b = tr.fit_market(train, val, cfg, seed=5)
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        np.testing.assert_array_equal(x, y)
    assert (a.tail.u, a.tail.v) == (b.tail.u, b.tail.v)
    c = tr.fit_market(train, val, cfg, seed=6)
    assert not np.array_equal(a.params.arrays()[0], c.params.arrays()[0])


def test_no_attention_ablation_trains_without_touching_attention(market_sets):
    train, val = market_sets
    cfg = tr.TrainConfig(**{**FAST, "ablation": "no-attention"})
    m = tr.fit_market(train, val, cfg, seed=3)
    assert m.trace.accepted_val < m.trace.initial_val
    from gfagru.agru import init_params
    init = init_params(2, cfg.hidden_market, 2, 3)
    for name in ("v_a", "W_a", "U_a"):
        np.testing.assert_array_equal(getattr(m.params, name), getattr(init, name))


def test_stock_fit(market_data, market_sets):
    md, sp = market_data
    train, val = market_sets
    mm = tr.fit_market(train, val, tr.TrainConfig(**FAST), seed=0)
    st_train, st_val = pl.fit_samples(md, sp, 10, stock=0)
    z_tr, z_va = mm.z_fit[:len(train)], mm.z_fit[len(train):]
    sm = tr.fit_stock(st_train, st_val, z_tr, z_va, tr.TrainConfig(**FAST), seed=0)
    assert sm.trace.accepted_val < sm.trace.initial_val
    assert sm.predict(st_val.X).shape == (len(st_val), 3)
    assert (sm.predict(st_val.X)[:, 1:] > 0).all()
    with pytest.raises(ValueError):
        tr.fit_stock(st_train, st_val, z_tr[:-1], z_va, tr.TrainConfig(**FAST), seed=0)


def test_numerical_failure_halves_rates_then_aborts(market_sets, monkeypatch):
    train, val = market_sets
    calls = {"n": 0}
    real = tr._Fit._net_block

    def flaky(self, outer, lr):
        calls["n"] += 1
        if calls["n"] == 1:
            raise FloatingPointError("injected")
        return real(self, outer, lr)

    monkeypatch.setattr(tr._Fit, "_net_block", flaky)
    m = tr.fit_market(train, val, tr.TrainConfig(**{**FAST, "n_outer": 1}), seed=0)
    assert m.trace.lr_halved

    def broken(self, outer, lr):
        raise FloatingPointError("injected")

    monkeypatch.setattr(tr._Fit, "_net_block", broken)
    with pytest.raises(tr.TrainingError) as info:
        tr.fit_market(train, val, tr.TrainConfig(**FAST), seed=0)
    assert info.value.snapshot is not None


def test_ensemble_average_example():
    avg = tr.average_thetas([np.array([0.01, 0.2]), np.array([0.03, 0.4])])
    np.testing.assert_allclose(avg, [0.02, 0.3])
    with pytest.raises(ValueError):
        tr.average_thetas([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        tr.average_thetas([])


def test_ensemble_rejects_mismatched_architecture(market_sets):
    train, val = market_sets
    a = tr.fit_market(train, val, tr.TrainConfig(**{**FAST, "n_outer": 1}), seed=0)
    b = tr.fit_market(train, val, tr.TrainConfig(**{**FAST, "n_outer": 1, "hidden_market": 3}), seed=0)
    with pytest.raises(ValueError):
        tr.ensemble_market([a, b], val.X)
    theta, tail = tr.ensemble_market([a, a], val.X)
    np.testing.assert_allclose(theta, a.predict(val.X))


def test_pipeline_persistence_and_forecast(market_data, tmp_path):
    md, sp = market_data
    cfg = tr.TrainConfig(**{**FAST, "n_outer": 1, "ensemble": 2})
    market, stocks, seeds = pl.train_ensemble(md, sp, cfg, seed=0)
    assert len(market) == 2 and all(len(v) == 2 for v in stocks.values())
    manifest = tr.save_models(tmp_path, market, stocks, cfg, seeds)
    assert manifest["fix_optim"] and manifest["ablation"] == "full"
    cfg2, market2, stocks2, _ = tr.load_models(tmp_path)
    assert cfg2 == cfg
    anchors = sp.rebalance_anchors()
    f1 = pl.forecast_path(market, stocks, md, anchors, cfg.T)
    f2 = pl.forecast_path(market2, stocks2, md, anchors, cfg.T)
    assert len(f1) == len(anchors)
    for a, b in zip(f1, f2):
        assert a.to_dict() == b.to_dict()
    m = f1[0]
    assert m.tickers == md.tickers
    assert math.isclose(m.tail_m.u, np.mean([x.tail.u for x in market]))
    with pytest.raises(FileNotFoundError):
        tr.load_models(tmp_path / "nothing")


def test_naive_manifest_records_skipped_tail_fits(market_data, tmp_path):
    md, sp = market_data
    cfg = tr.TrainConfig(**{**FAST, "n_outer": 1, "ablation": "naive"})
    market, stocks, seeds = pl.train_ensemble(md, sp, cfg, seed=0)
    manifest = tr.save_models(tmp_path, market, stocks, cfg, seeds)
    assert manifest["fix_optim"] is False
    fc = pl.forecast_path(market, stocks, md, sp.rebalance_anchors()[:2], cfg.T)
    for m in fc:
        assert (m.tail_m.u, m.tail_m.v) == (1.0, 1.0)
        assert (m.tail_i == 1.0).all() and (m.tail_im == 1.0).all()


def test_stock_residual_tails_recovered_without_market_exposure():
    truth = gf.ForecastedFactorModel(gf.MarketTheta(0.01, 0.04), gf.TailParams(1.5, 1.5), [0.005], [0.0], [0.03],
                                     [[1.5, 1.5]], [[2.2, 1.4]])
    sc = gf.simulate(truth, 3000, seed=21)
    z_m = gf.latent_market(sc.market, truth.market, truth.tail_m)
    rng = np.random.default_rng(22)
    data = dp.SampleSet(rng.normal(size=(3000, 4, 10)), sc.returns[:, 0], np.arange(3000))
    train, val = data.take(slice(0, 2400)), data.take(slice(2400, 3000))
    cfg = tr.TrainConfig(T=10, n_outer=3, n_tv=300, n_fix=300, eval_every=50)
    sm = tr.fit_stock(train, val, z_m[:2400], z_m[2400:], cfg, seed=0)
    np.testing.assert_allclose(sm.tail_i.as_array(), [2.2, 1.4], atol=0.3)

    # direct maximum likelihood of the constant model on the same rows
    def nll(p):
        a, b, log_g, u, v = p
        if not (1 <= u <= 3 and 1 <= v <= 3):
            return 1e9
        return -gf.stock_cond_loglik(train.y, z_m[:2400], gf.StockTheta(a, b, np.exp(log_g)),
                                     truth.tail_m, gf.TailParams(u, v)).sum()

    mle = optimize.minimize(nll, [0.005, 0.0, np.log(0.03), 1.5, 1.5], method="Nelder-Mead",
                            options=dict(maxiter=4000, xatol=1e-6, fatol=1e-8))
    np.testing.assert_allclose(sm.tail_i.as_array(), mle.x[3:], atol=0.15)
