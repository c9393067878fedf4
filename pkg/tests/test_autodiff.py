import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfagru import autodiff as ad
from gfagru.autodiff import Tape, Tensor


def grad_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    return out, tape.backward(out, leaves)


def fd_grad(fn, arrays, i, h=1e-5):
    base = [np.array(a, dtype=float) for a in arrays]
    g = np.zeros_like(base[i])
    for idx in np.ndindex(base[i].shape):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i][idx] += h
        minus[i][idx] -= h
        fp = fn(*[Tensor(a) for a in plus]).data.sum()
        fm = fn(*[Tensor(a) for a in minus]).data.sum()
        g[idx] = (fp - fm) / (2 * h)
    return g


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_log_exp_identity():
    assert abs(ad.log(ad.exp(Tensor(2.5))).data - 2.5) < 1e-12


def test_matmul_shape():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)


def test_square_gradient():
    _, (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == pytest.approx(6.0)


def test_log_sigmoid_gradient_at_zero():
    _, (g,) = grad_of(lambda x: ad.log(ad.sigmoid(x)), 0.0)
    assert g == pytest.approx(0.5, abs=1e-15)


def test_constant_expression_has_zero_gradients():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        out = ad.sum(ad.exp(Tensor([1.0, 2.0])) * 3.0) + 0.0 * ad.sum(x)
    gx, gy = tape.backward(out, [x, y])
    assert (gx == 0).all() and (gy == 0).all()


def test_backward_twice_raises():
    x = Tensor(1.0, requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    tape.backward(y, [x])
    with pytest.raises(ad.TapeError):
        tape.backward(y, [x])


def test_seed_shape_checked():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y, [x], seed=np.ones(2))


def test_nonfinite_names_primitive_and_operand():
    with pytest.raises(ad.NonFiniteError, match=r"log: operand 0"):
        ad.log(Tensor([-1.0]))
    with pytest.raises(ad.NonFiniteError, match=r"operand 1"):
        ad.add(Tensor([1.0]), Tensor([np.nan]))


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "softmax": lambda a: ad.softmax(a, axis=-1) * Tensor(np.arange(1.0, 5.0)),
    "square": ad.square,
    "neg": ad.neg,
    "log": lambda a: ad.log(a * a + 1.0),
    "sum": lambda a: ad.sum(a, axis=1) * Tensor([1.0, -2.0, 3.0]),
    "mean": lambda a: ad.mean(a, axis=0, keepdims=True),
    "reshape": lambda a: ad.reshape(a, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3)),
    "transpose": lambda a: ad.transpose(a) * Tensor(np.arange(12.0).reshape(4, 3)),
    "getitem": lambda a: a[1:, ::2] * 3.0,
    "fancy_getitem": lambda a: a[[0, 0, 2]] * Tensor(np.arange(12.0).reshape(3, 4)),
    "clip": lambda a: ad.clip(a, -0.5, 0.5),
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "maximum": ad.maximum,
    "minimum": ad.minimum,
    "power": lambda a, b: ad.power(a * a + 1.0, b),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0) * Tensor(np.arange(24.0).reshape(6, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_match_finite_differences(name):
    rng = np.random.default_rng(0)
    a = rng.uniform(-2, 2, (3, 4))
    if name == "clip":
        # keep points away from the kinks
        a = np.where(np.abs(np.abs(a) - 0.5) < 1e-3, 0.0, a)
    fn = UNARY[name]
    out, (g,) = grad_of(lambda x: ad.sum(fn(x)), a)
    num = fd_grad(fn, [a], 0)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_match_finite_differences(name):
    rng = np.random.default_rng(1)
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (3, 4))
    fn = BINARY[name]
    _, grads = grad_of(lambda x, y: ad.sum(fn(x, y)), a, b)
    for i in range(2):
        np.testing.assert_allclose(grads[i], fd_grad(fn, [a, b], i), rtol=1e-4, atol=1e-7)


def test_broadcast_gradient_reduces_to_operand_shape():
    _, (ga, gb) = grad_of(lambda a, b: ad.sum(a * b), np.ones((3, 4)), np.arange(4.0))
    assert gb.shape == (4,)
    np.testing.assert_allclose(gb, [3, 3, 3, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_gradient_of_sum_is_sum_of_gradients(vals):
    x0 = np.array(vals)
    f1 = lambda x: ad.sum(ad.tanh(x) * x)
    f2 = lambda x: ad.sum(ad.exp(x * 0.5))
    _, (g1,) = grad_of(f1, x0)
    _, (g2,) = grad_of(f2, x0)
    _, (g12,) = grad_of(lambda x: f1(x) + f2(x), x0)
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-12, rtol=0)


def test_rmsprop_zero_gradient():
    state = ad.RMSPropState(lr=0.1, square_avg=[np.array([4.0])], buf=[np.array([0.0])])
    (p,), new = ad.rmsprop_step([np.array([1.5])], [np.array([0.0])], state)
    assert p[0] == 1.5
    assert new.square_avg[0][0] == pytest.approx(0.99 * 4.0)


def test_rmsprop_hand_example():
    (p,), st_ = ad.rmsprop_step([np.array(0.0)], [np.array(1.0)], ad.RMSPropState(lr=0.01))
    assert st_.square_avg[0] == pytest.approx(0.01)
    assert st_.buf[0] == pytest.approx(1 / (0.1 + 1e-8), rel=1e-12)
    assert p == pytest.approx(-0.0999999, rel=1e-6)


def test_rmsprop_deterministic_and_rejects_nonfinite():
    p = [np.array([0.3, -0.2])]
    g = [np.array([0.5, 0.1])]
    a, sa = ad.rmsprop_step(p, g, ad.RMSPropState(lr=0.01))
    b, sb = ad.rmsprop_step(p, g, ad.RMSPropState(lr=0.01))
    assert a[0].tobytes() == b[0].tobytes()
    assert sa.buf[0].tobytes() == sb.buf[0].tobytes()
    with pytest.raises(ad.NonFiniteError):
        ad.rmsprop_step(p, [np.array([np.inf, 0.0])], ad.RMSPropState(lr=0.01))
    with pytest.raises(ValueError):
        ad.RMSPropState(lr=0.0)


def test_snapshot_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"W": rng.normal(size=(4, 2)), "b": np.array([1e-300, -0.0, np.pi]), "s": np.array(2.5)}
    path = tmp_path / "snap.bin"
    ad.save_snapshot(path, arrays)
    back = ad.load_snapshot(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k])
        assert back[k].tobytes() == np.asarray(arrays[k]).tobytes()
