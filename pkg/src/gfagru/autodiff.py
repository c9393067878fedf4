"""Small reverse-mode differentiation engine over dense numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in
evaluation order; :meth:`Tape.backward` replays them once in reverse to
produce vector-Jacobian products for the requested leaves.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y, [x])[0]
    array(6.)

The module also carries the RMSProp-with-momentum update used by the
trainer and a flat binary snapshot format for parameter arrays.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "TapeError", "as_tensor", "custom",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "tanh",
    "sigmoid", "softplus", "softmax", "power", "maximum", "minimum", "clip",
    "sum", "mean", "reshape", "transpose", "concat", "getitem", "square",
    "backward", "RMSPropState", "rmsprop_step", "save_snapshot",
    "load_snapshot", "dumps_snapshot", "loads_snapshot",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced or received non-finite values."""


class TapeError(RuntimeError):
    """Misuse of a tape, e.g. a second backward pass."""


_TAPES: list["Tape"] = []


class Tensor:
    """Dense float64 array plus the bookkeeping needed for gradients."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    name: str
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitives executed while it is the innermost active tape."""

    def __init__(self):
        self.records: list[_Record] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor, leaves: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``seed . root`` with respect to each leaf.

        Leaves the root does not depend on get zero gradients.
        """
        if self._used:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        self._used = True
        if seed is None:
            seed = np.ones_like(root.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ValueError(f"seed shape {seed.shape} does not match root shape {root.shape}")

        adj: dict[int, np.ndarray] = {id(root): seed}
        for rec in reversed(self.records):
            g = adj.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        return [adj.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves]


def backward(tape: Tape, root: Tensor, leaves: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    return tape.backward(root, leaves, seed)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check(name: str, value: np.ndarray, parents: Sequence[Tensor]) -> None:
    if np.isfinite(value).all():
        return
    for i, p in enumerate(parents):
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"{name}: operand {i} contains non-finite values")
    raise NonFiniteError(f"{name}: non-finite result from finite operands")


def custom(name: str, value: np.ndarray, parents: Sequence, vjp) -> Tensor:
    """Register a primitive with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one array (or None) per parent, in order.
    """
    parents = tuple(as_tensor(p) for p in parents)
    value = np.asarray(value, dtype=np.float64)
    _check(name, value, parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].records.append(_Record(name, out, parents, vjp))
    return out


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(a) -> Tensor:
    a = as_tensor(a)
    return custom("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if (b.data == 0).any():
        raise NonFiniteError("div: operand 1 contains zeros")
    q = a.data / b.data
    return custom("div", q, (a, b), lambda g: (g / b.data, -g * q / b.data))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return custom("matmul", a.data @ b.data, (a, b), vjp)


# -- nonlinearities ---------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return custom("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: operand 0 has nonpositive entries")
    return custom("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return custom("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return custom("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return custom("softplus", np.logaddexp(0.0, a.data), (a,),
                  lambda g: (g * _sigmoid(a.data),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom("softmax", s, (a,), vjp)


def power(base, exponent) -> Tensor:
    """``base ** exponent`` for strictly positive base, via exp(x ln u)."""
    base, exponent = as_tensor(base), as_tensor(exponent)
    if (base.data <= 0).any():
        raise ValueError("power: operand 0 (base) must be strictly positive")
    lb = np.log(base.data)
    val = np.exp(exponent.data * lb)

    def vjp(g):
        return (g * exponent.data * val / base.data, g * val * lb)

    return custom("power", val, (base, exponent), vjp)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return custom("maximum", np.where(take_a, a.data, b.data), (a, b),
                  lambda g: (g * take_a, g * ~take_a))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return custom("minimum", np.where(take_a, a.data, b.data), (a, b),
                  lambda g: (g * take_a, g * ~take_a))


def clip(a, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


# -- reductions and shape ---------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return custom("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return custom("slice", a.data[idx], (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return custom("concat", np.concatenate([t.data for t in tensors], axis=axis),
                  tensors, vjp)


# -- optimizer --------------------------------------------------------------

@dataclass
class RMSPropState:
    """Running statistics of RMSProp with momentum on the preconditioned step."""

    lr: float
    momentum: float = 0.2
    rho: float = 0.99
    eps: float = 1e-8
    square_avg: list[np.ndarray] = field(default_factory=list)
    buf: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                 state: RMSPropState) -> tuple[list[np.ndarray], RMSPropState]:
    """One update; returns new parameter arrays and a new state.

    v <- rho v + (1 - rho) g^2;  buf <- m buf + g / (sqrt(v) + eps);
    theta <- theta - lr buf.  A non-finite gradient rejects the step.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"gradient {i} shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"rmsprop_step: gradient {i} is non-finite; step rejected")
    sq = state.square_avg or [np.zeros_like(p, dtype=np.float64) for p in params]
    buf = state.buf or [np.zeros_like(p, dtype=np.float64) for p in params]

    new_p, new_sq, new_buf = [], [], []
    for p, g, v, b in zip(params, grads, sq, buf):
        v = state.rho * v + (1.0 - state.rho) * g * g
        b = state.momentum * b + g / (np.sqrt(v) + state.eps)
        new_p.append(p - state.lr * b)
        new_sq.append(v)
        new_buf.append(b)
    new_state = RMSPropState(state.lr, state.momentum, state.rho, state.eps, new_sq, new_buf)
    return new_p, new_state


# -- snapshots --------------------------------------------------------------
#
# Layout: b"GFSNAP1\n", uint32 little-endian header length, UTF-8 JSON header
# {"arrays": [{"name": str, "shape": [int, ...]}, ...]}, then each array's
# values as little-endian float64 in row-major order, in header order.

_MAGIC = b"GFSNAP1\n"


def dumps_snapshot(arrays: dict[str, np.ndarray]) -> bytes:
    header = {"arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<I", len(hb)))
    out.write(hb)
    for v in arrays.values():
        out.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return out.getvalue()


def loads_snapshot(raw: bytes) -> dict[str, np.ndarray]:
    if not raw.startswith(_MAGIC):
        raise ValueError("not a parameter snapshot (bad magic)")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        arrays[entry["name"]] = vals.astype(np.float64).reshape(shape)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError("snapshot has trailing bytes")
    return arrays


def save_snapshot(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_snapshot(arrays))


def load_snapshot(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads_snapshot(fh.read())
