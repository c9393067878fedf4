import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfagru import agru
from gfagru import autodiff as ad
from gfagru.agru import HeadSpec


def zero_params(d_in=2, n=4, d_out=2):
    p = agru.init_params(d_in, n, d_out, 0)
    return agru.AgruParams.from_arrays([np.zeros_like(a) for a in p.arrays()])


def test_parameter_count():
    assert agru.init_params(2, 4, 2, 0).n_params == 130


def test_init_reproducible_and_bounded():
    a, b = agru.init_params(4, 6, 3, 5), agru.init_params(4, 6, 3, 5)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    c = agru.init_params(4, 6, 3, 6)
    assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), c.arrays()))
    assert all(np.abs(x).max() <= 1 / math.sqrt(6) for x in a.arrays())
    assert not a.b_z.any() and not a.b_o.any()
    with pytest.raises(ValueError):
        agru.init_params(0, 4, 2, 0)


def test_zero_weights_give_zero_hidden_states():
    y = agru.gru_forward(zero_params(), np.zeros((2, 7)))
    assert y.shape == (4, 7) and not y.any()


def test_single_step_matches_cell():
    p = agru.init_params(2, 4, 2, 3)
    x = np.array([[0.3], [-1.2]])
    sig = lambda a: 1 / (1 + np.exp(-a))
    z = sig(p.W_z @ x[:, 0] + p.b_z)
    c = np.tanh(p.W_h @ x[:, 0] + p.b_h)
    y = agru.gru_forward(p, x)
    assert y.shape == (4, 1)
    np.testing.assert_allclose(y[:, 0], z * c, atol=1e-15)


def test_shapes_finite_and_bounded():
    p = agru.init_params(2, 4, 2, 1)
    y = agru.gru_forward(p, np.random.default_rng(0).normal(size=(2, 5)) * 10)
    assert y.shape == (4, 5) and np.isfinite(y).all()
    assert np.abs(y).max() < 1
    with pytest.raises(ValueError):
        agru.gru_forward(p, np.zeros((3, 5)))


def test_fused_gru_matches_composed_reference():
    p = agru.init_params(4, 5, 3, 2)
    x = np.random.default_rng(1).normal(size=(7, 4, 9))
    tp1, tp2 = agru.as_tensors(p, True), agru.as_tensors(p, True)
    seed = np.random.default_rng(2).normal(size=(7, 9, 5))
    with ad.Tape() as t1:
        h1 = agru.gru_hidden_t(tp1, x)
        l1 = ad.sum(h1 * seed)
    with ad.Tape() as t2:
        h2 = agru.gru_reference_t(tp2, x)
        l2 = ad.sum(h2 * seed)
    np.testing.assert_allclose(h1.data, h2.data, atol=1e-14)
    for g1, g2 in zip(t1.backward(l1, list(tp1.values())), t2.backward(l2, list(tp2.values()))):
        np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_attention_examples():
    p = agru.init_params(2, 4, 2, 0)
    y = np.tile(np.array([[0.1], [-0.2], [0.3], [0.05]]), (1, 6))
    s, a = agru.attention(p, y)
    np.testing.assert_allclose(a, 1 / 6, atol=1e-15)
    np.testing.assert_allclose(s, y[:, 0], atol=1e-15)
    s, a = agru.attention(p, y[:, :1])
    assert a.tolist() == [1.0]
    p.v_a[:] = 0
    _, a = agru.attention(p, np.random.default_rng(0).normal(size=(4, 5)))
    np.testing.assert_allclose(a, 0.2, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_attention_weights_form_distribution(seed, t_len):
    rng = np.random.default_rng(seed)
    p = agru.init_params(2, 4, 2, seed)
    _, a = agru.attention(p, rng.uniform(-1, 1, (4, t_len)))
    assert (a >= 0).all()
    assert abs(a.sum() - 1) < 1e-12


def test_head_bounds():
    p = zero_params(d_out=3)
    out = agru.predict_theta(p, HeadSpec.stock(), np.zeros((2, 3)))
    assert out[2] == pytest.approx(math.log(2) + 1e-4, abs=1e-15)
    assert out[0] == 0.0
    p.b_o[:] = [50.0, -50.0, -50.0]
    out = agru.predict_theta(p, HeadSpec.stock(), np.zeros((2, 3)))
    assert out[0] == 5.0 and out[1] == -5.0
    assert out[2] == 1e-4
    box = HeadSpec(("box", "positive", "unbounded"), boxes=((1.0, 3.0), None, None))
    p.b_o[:] = [0.0, 0.0, 0.0]
    assert agru.predict_theta(p, box, np.zeros((2, 3)))[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        HeadSpec(("box",))
    with pytest.raises(ValueError):
        agru.predict_theta(p, HeadSpec.market(), np.zeros((2, 3)))


def test_predict_deterministic_and_batched():
    p = agru.init_params(4, 6, 3, 9)
    x = np.random.default_rng(3).normal(size=(5, 4, 8))
    batch = agru.predict_theta(p, HeadSpec.stock(), x)
    one = agru.predict_theta(p, HeadSpec.stock(), x[2])
    assert batch.shape == (5, 3)
    np.testing.assert_allclose(batch[2], one, atol=1e-15)
    assert agru.predict_theta(p, HeadSpec.stock(), x[2]).tobytes() == one.tobytes()


def test_end_to_end_gradient_matches_finite_differences():
    p = agru.init_params(2, 4, 2, 4)
    p.b_o[:] = [0.1, -0.3]
    x = np.random.default_rng(5).normal(size=(3, 2, 6))
    y = np.array([0.2, -0.1, 0.05])

    def loss(params):
        tp = agru.as_tensors(params, True)
        with ad.Tape() as tape:
            th = agru.forward_t(tp, x, HeadSpec.market())
            l = ad.sum(ad.square((y - th[:, 0]) / th[:, 1]) + ad.log(th[:, 1]))
        return l, tape, tp

    l, tape, tp = loss(p)
    grads = tape.backward(l, list(tp.values()))
    h = 1e-6
    for name, g in zip(tp, grads):
        arr = getattr(p, name)
        for idx in list(np.ndindex(arr.shape))[:4]:
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(p)[0].data
            arr[idx] = old - h
            lm = loss(p)[0].data
            arr[idx] = old
            num = (lp - lm) / (2 * h)
            assert abs(g[idx] - num) <= 1e-3 * max(abs(num), 1e-4), (name, idx, g[idx], num)


def test_no_attention_keeps_recurrence_and_ignores_attention_weights():
    p = agru.init_params(2, 4, 2, 7)
    x = np.random.default_rng(6).normal(size=(4, 2, 5))
    tp = agru.as_tensors(p, True)
    with ad.Tape() as tape:
        hs = agru.gru_hidden_t(tp, x)
        out = agru.forward_t(tp, x, HeadSpec.market(), use_attention=False)
        loss = ad.sum(out)
    grads = dict(zip(tp, tape.backward(loss, list(tp.values()))))
    np.testing.assert_array_equal(hs.data, agru.gru_hidden_t(agru.as_tensors(p), x).data)
    for k in ("v_a", "W_a", "U_a"):
        assert not grads[k].any()
    direct = agru.head_t(agru.as_tensors(p), ad.Tensor(hs.data[:, -1, :]), HeadSpec.market()).data
    np.testing.assert_array_equal(out.data, direct)


def test_snapshot_roundtrip(tmp_path):
    p = agru.init_params(4, 6, 3, 1)
    ad.save_snapshot(tmp_path / "p.bin", p.as_dict())
    back = agru.AgruParams.from_arrays(ad.load_snapshot(tmp_path / "p.bin"))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), back.arrays()))
