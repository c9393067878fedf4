"""One-layer GRU with additive attention and a bounded linear head.

A feature window of shape ``D_in x T`` (or a batch ``B x D_in x T``) is run
through a GRU from a zero initial state.  Attention scores every hidden state
against the last one,

    e_tau = v_a . tanh(W_a y_tau + U_a y_T),   alpha = softmax(e),

and the context ``sum_tau alpha_tau y_tau`` feeds a linear head whose channels
are squashed according to a :class:`HeadSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h",
               "v_a", "W_a", "U_a", "W_o", "b_o")
KINDS = ("unbounded", "positive", "box")


@dataclass(frozen=True)
class HeadSpec:
    """Per-channel output squashing.

    ``unbounded`` channels are clipped to [-clip, clip]; ``positive`` channels
    are softplus(x) + floor; ``box`` channels map to lo + (hi - lo) sigmoid(x)
    with bounds taken from ``boxes`` (same length as ``kinds``, None elsewhere).
    """

    kinds: tuple[str, ...]
    clip: float = 5.0
    floor: float = 1e-4
    boxes: tuple = ()

    def __post_init__(self):
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown head channel kind {k!r}")
        if not self.clip > 0 or not self.floor > 0:
            raise ValueError("clip and floor must be positive")
        boxes = tuple(self.boxes) or (None,) * len(self.kinds)
        if len(boxes) != len(self.kinds):
            raise ValueError("boxes must align with kinds")
        for k, b in zip(self.kinds, boxes):
            if k == "box" and (b is None or not b[0] < b[1]):
                raise ValueError("box channel needs (lo, hi) with lo < hi")
        object.__setattr__(self, "boxes", boxes)

    @property
    def d_out(self) -> int:
        return len(self.kinds)

    @classmethod
    def market(cls, **kw) -> "HeadSpec":
        return cls(("unbounded", "positive"), **kw)

    @classmethod
    def stock(cls, **kw) -> "HeadSpec":
        return cls(("unbounded", "unbounded", "positive"), **kw)


@dataclass
class AgruParams:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray
    v_a: np.ndarray
    W_a: np.ndarray
    U_a: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        n, d_in = self.W_z.shape
        d_out = self.W_o.shape[0]
        want = {
            "W_z": (n, d_in), "W_r": (n, d_in), "W_h": (n, d_in),
            "U_z": (n, n), "U_r": (n, n), "U_h": (n, n), "W_a": (n, n), "U_a": (n, n),
            "b_z": (n,), "b_r": (n,), "b_h": (n,), "v_a": (n,),
            "W_o": (d_out, n), "b_o": (d_out,),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.W_z.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_z.shape[1]

    @property
    def d_out(self) -> int:
        return self.W_o.shape[0]

    @property
    def n_params(self) -> int:
        return int(np.sum([a.size for a in self.as_dict().values()]))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in PARAM_NAMES]

    @classmethod
    def from_arrays(cls, arrays) -> "AgruParams":
        if isinstance(arrays, dict):
            return cls(**{k: arrays[k] for k in PARAM_NAMES})
        return cls(*arrays)

    def copy(self) -> "AgruParams":
        return AgruParams.from_arrays([a.copy() for a in self.arrays()])

    def same_architecture(self, other: "AgruParams") -> bool:
        return all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))


def init_params(d_in: int, n: int, d_out: int, seed) -> AgruParams:
    """Weights uniform in [-1/sqrt(n), 1/sqrt(n)], biases zero."""
    if min(d_in, n, d_out) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    k = 1.0 / np.sqrt(n)
    w = lambda *shape: rng.uniform(-k, k, shape)
    return AgruParams(
        W_z=w(n, d_in), U_z=w(n, n), b_z=np.zeros(n),
        W_r=w(n, d_in), U_r=w(n, n), b_r=np.zeros(n),
        W_h=w(n, d_in), U_h=w(n, n), b_h=np.zeros(n),
        v_a=w(n), W_a=w(n, n), U_a=w(n, n),
        W_o=w(d_out, n), b_o=np.zeros(d_out),
    )


# -- graph construction -------------------------------------------------------

def _batch(window, d_in: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != d_in:
        raise ValueError(f"window must be D_in x T with D_in={d_in}, got shape {np.shape(window)}")
    if x.shape[2] < 1:
        raise ValueError("window needs T >= 1")
    return x, single


def _gru_scan(x, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh):
    b, _, t_len = x.shape
    n = Uz.shape[0]
    xt = np.ascontiguousarray(np.transpose(x, (2, 0, 1)))
    xz = xt @ Wz.T + bz
    xr = xt @ Wr.T + br
    xh = xt @ Wh.T + bh
    hs = np.empty((t_len + 1, b, n))
    hs[0] = 0.0
    zs = np.empty((t_len, b, n))
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    for t in range(t_len):
        h = hs[t]
        z = 1.0 / (1.0 + np.exp(-(xz[t] + h @ Uz.T)))
        r = 1.0 / (1.0 + np.exp(-(xr[t] + h @ Ur.T)))
        c = np.tanh(xh[t] + (r * h) @ Uh.T)
        hs[t + 1] = h + z * (c - h)
        zs[t], rs[t], cs[t] = z, r, c
    return hs, zs, rs, cs


def gru_hidden_t(p: dict[str, Tensor], x: np.ndarray) -> Tensor:
    """Hidden states as a (B, T, n) tensor, one fused primitive on the tape.

    Backpropagation through time is written out by hand; the gate algebra
    matches :func:`gru_reference_t`, which composes elementary primitives.
    """
    keys = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")
    w = [p[k].data for k in keys]
    Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh = w
    hs, zs, rs, cs = _gru_scan(x, *w)
    t_len = x.shape[2]

    def vjp(g):
        grads = [np.zeros_like(a) for a in w]
        dWz, dUz, dbz, dWr, dUr, dbr, dWh, dUh, dbh = grads
        dh_next = np.zeros_like(hs[0])
        for t in range(t_len - 1, -1, -1):
            h, z, r, c, xt = hs[t], zs[t], rs[t], cs[t], x[:, :, t]
            dh = g[:, t, :] + dh_next
            ac = dh * z * (1.0 - c * c)
            az = dh * (c - h) * z * (1.0 - z)
            drh = ac @ Uh
            ar = drh * h * r * (1.0 - r)
            dWh += ac.T @ xt
            dUh += ac.T @ (r * h)
            dbh += ac.sum(axis=0)
            dWz += az.T @ xt
            dUz += az.T @ h
            dbz += az.sum(axis=0)
            dWr += ar.T @ xt
            dUr += ar.T @ h
            dbr += ar.sum(axis=0)
            dh_next = dh * (1.0 - z) + drh * r + az @ Uz + ar @ Ur
        return grads

    return ad.custom("gru", np.transpose(hs[1:], (1, 0, 2)), [p[k] for k in keys], vjp)


def gru_reference_t(p: dict[str, Tensor], x: np.ndarray) -> Tensor:
    """Same recurrence built from elementary primitives, (B, T, n)."""
    b, _, t_len = x.shape
    n = p["U_z"].shape[0]
    h = Tensor(np.zeros((b, n)))
    out = []
    for t in range(t_len):
        xt = Tensor(x[:, :, t])
        z = ad.sigmoid(ad.matmul(xt, ad.transpose(p["W_z"])) + ad.matmul(h, ad.transpose(p["U_z"])) + p["b_z"])
        r = ad.sigmoid(ad.matmul(xt, ad.transpose(p["W_r"])) + ad.matmul(h, ad.transpose(p["U_r"])) + p["b_r"])
        cand = ad.tanh(ad.matmul(xt, ad.transpose(p["W_h"])) + ad.matmul(r * h, ad.transpose(p["U_h"])) + p["b_h"])
        h = h + z * (cand - h)
        out.append(ad.reshape(h, (b, 1, n)))
    return ad.concat(out, axis=1)


def attention_t(p: dict[str, Tensor], hs: Tensor) -> tuple[Tensor, Tensor]:
    """Context (B, n) and weights (B, T) from hidden states (B, T, n)."""
    b, t_len, n = hs.shape
    last = ad.reshape(ad.matmul(hs[:, -1, :], ad.transpose(p["U_a"])), (b, 1, n))
    act = ad.tanh(ad.matmul(hs, ad.transpose(p["W_a"])) + last)
    scores = ad.reshape(ad.matmul(act, ad.reshape(p["v_a"], (n, 1))), (b, t_len))
    weights = ad.softmax(scores, axis=1)
    context = ad.sum(hs * ad.reshape(weights, (b, t_len, 1)), axis=1)
    return context, weights


def head_t(p: dict[str, Tensor], s: Tensor, head: HeadSpec) -> Tensor:
    pre = ad.matmul(s, ad.transpose(p["W_o"])) + p["b_o"]
    cols = []
    for j, kind in enumerate(head.kinds):
        c = pre[:, j:j + 1]
        if kind == "unbounded":
            c = ad.clip(c, -head.clip, head.clip)
        elif kind == "positive":
            c = ad.softplus(c) + head.floor
        else:
            lo, hi = head.boxes[j]
            c = lo + (hi - lo) * ad.sigmoid(c)
        cols.append(c)
    return ad.concat(cols, axis=1)


def forward_t(p: dict[str, Tensor], x: np.ndarray, head: HeadSpec,
              use_attention: bool = True) -> Tensor:
    """Batched forward pass, x of shape (B, D_in, T); returns (B, D_out)."""
    hs = gru_hidden_t(p, x)
    s = attention_t(p, hs)[0] if use_attention else hs[:, -1, :]
    return head_t(p, s, head)


def as_tensors(params: AgruParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.as_dict().items()}


# -- plain numpy entry points --------------------------------------------------

def gru_forward(params: AgruParams, window) -> np.ndarray:
    """Hidden sequence, n x T (or B x n x T for a batch of windows)."""
    x, single = _batch(window, params.d_in)
    y = np.transpose(gru_hidden_t(as_tensors(params), x).data, (0, 2, 1))
    return y[0] if single else y


def attention(params: AgruParams, y) -> tuple[np.ndarray, np.ndarray]:
    """Context vector and weights for a hidden sequence n x T (or B x n x T)."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.shape[1] != params.n or y.shape[2] < 1:
        raise ValueError(f"hidden sequence must be n x T with n={params.n}")
    s, a = attention_t(as_tensors(params), Tensor(np.transpose(y, (0, 2, 1))))
    return (s.data[0], a.data[0]) if single else (s.data, a.data)


def predict_theta(params: AgruParams, head: HeadSpec, window,
                  use_attention: bool = True) -> np.ndarray:
    """Time-varying parameters for one window (D_out,) or a batch (B, D_out)."""
    if head.d_out != params.d_out:
        raise ValueError(f"head has {head.d_out} channels, network has {params.d_out}")
    x, single = _batch(window, params.d_in)
    out = forward_t(as_tensors(params), x, head, use_attention).data
    bad = ~np.isfinite(out)
    if bad.any():
        raise ValueError(f"non-finite output in channel {int(np.argwhere(bad)[0][-1])}")
    return out[0] if single else out
