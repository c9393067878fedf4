"""Heavy-tail generative factor model.

A standard normal draw ``x`` is pushed through the monotone map

    g(x; u, v) = x * ((u**x + v**(-x)) / A + 1)

where ``u`` shapes the right tail and ``v`` the left (``u = v = 1`` gives the
linear map ``1.5 x`` at ``A = 4``).  Monthly returns follow

    Y_M = alpha_M + beta_M g(Z_M; nu_M)
    Y_i = alpha_i + beta_i g(Z_M; nu_i^M) + gamma_i g(Z_i; nu_i)

with independent standard normal ``Z``.  Densities come from the change of
variables through ``g``, whose inverse is found numerically.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

A_DEFAULT = 4.0
TAIL_MIN, TAIL_MAX = 1.0, 3.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# exponents x*ln(u) above this are compressed logarithmically
_SAT = 40.0
_SIM_BLOCK = 4096


@dataclass(frozen=True)
class TailParams:
    u: float = 1.0
    v: float = 1.0

    def __post_init__(self):
        for name in ("u", "v"):
            val = getattr(self, name)
            if not (TAIL_MIN - 1e-12 <= val <= TAIL_MAX + 1e-12):
                raise ValueError(f"tail parameter {name}={val} outside [{TAIL_MIN}, {TAIL_MAX}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class MarketTheta:
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"market scale beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class StockTheta:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"residual scale gamma must be positive, got {self.gamma}")


@dataclass
class ForecastedFactorModel:
    """Full generative model at one date.

    Stock quantities are arrays of length N; ``tail_im`` and ``tail_i`` are
    N x 2 arrays of (u, v) for the market-loading and residual transforms.
    """

    market: MarketTheta
    tail_m: TailParams
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    tail_im: np.ndarray
    tail_i: np.ndarray
    A: float = A_DEFAULT
    tickers: tuple[str, ...] = ()

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        n = self.alpha.shape[0]
        self.tail_im = np.asarray(self.tail_im, dtype=float).reshape(n, 2)
        self.tail_i = np.asarray(self.tail_i, dtype=float).reshape(n, 2)
        if n < 1:
            raise ValueError("factor model needs at least one stock")
        if self.beta.shape != (n,) or self.gamma.shape != (n,):
            raise ValueError("alpha, beta, gamma must share length")
        if (self.gamma <= 0).any():
            raise ValueError("all gamma must be positive")
        for arr in (self.tail_im, self.tail_i):
            if (arr < TAIL_MIN - 1e-12).any() or (arr > TAIL_MAX + 1e-12).any():
                raise ValueError("stock tail parameters must lie in [1, 3]")
        if not self.A > 0:
            raise ValueError("scaling constant A must be positive")
        if not self.tickers:
            self.tickers = tuple(f"S{i}" for i in range(n))

    @property
    def n_stocks(self) -> int:
        return self.alpha.shape[0]

    def stock_theta(self, i: int) -> StockTheta:
        return StockTheta(float(self.alpha[i]), float(self.beta[i]), float(self.gamma[i]))

    def to_dict(self) -> dict:
        return {
            "A": self.A,
            "market": {"alpha": self.market.alpha, "beta": self.market.beta,
                       "u": self.tail_m.u, "v": self.tail_m.v},
            "stocks": [
                {"ticker": t, "alpha": float(self.alpha[i]), "beta": float(self.beta[i]),
                 "gamma": float(self.gamma[i]),
                 "u_m": float(self.tail_im[i, 0]), "v_m": float(self.tail_im[i, 1]),
                 "u": float(self.tail_i[i, 0]), "v": float(self.tail_i[i, 1])}
                for i, t in enumerate(self.tickers)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastedFactorModel":
        m, st = d["market"], d["stocks"]
        return cls(
            market=MarketTheta(m["alpha"], m["beta"]),
            tail_m=TailParams(m["u"], m["v"]),
            alpha=[s["alpha"] for s in st], beta=[s["beta"] for s in st],
            gamma=[s["gamma"] for s in st],
            tail_im=[[s["u_m"], s["v_m"]] for s in st],
            tail_i=[[s["u"], s["v"]] for s in st],
            A=d.get("A", A_DEFAULT), tickers=tuple(s["ticker"] for s in st),
        )


@dataclass
class ScenarioMatrix:
    """n x N simulated one-month returns, optionally with the market draw."""

    returns: np.ndarray
    tickers: tuple[str, ...] = ()
    market: np.ndarray | None = None

    def __post_init__(self):
        self.returns = np.atleast_2d(np.asarray(self.returns, dtype=float))
        if not self.tickers:
            self.tickers = tuple(f"S{i}" for i in range(self.returns.shape[1]))
        if len(self.tickers) != self.returns.shape[1]:
            raise ValueError("ticker count does not match scenario columns")
        if not np.isfinite(self.returns).all():
            raise ValueError("scenario matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    def to_csv(self, path, market_column: str = "MARKET", comment: str | None = None) -> None:
        cols = list(self.tickers)
        data = self.returns
        if self.market is not None:
            cols = [market_column] + cols
            data = np.column_stack([self.market, data])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in data:
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path, market_column: str = "MARKET") -> "ScenarioMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        header, body = rows[0], rows[1:]
        data = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(header))
        market = None
        if market_column in header:
            j = header.index(market_column)
            market = data[:, j].copy()
            data = np.delete(data, j, axis=1)
            header = header[:j] + header[j + 1:]
        return cls(data, tuple(header), market)


# -- the transform ----------------------------------------------------------

def _expo(e):
    over = np.maximum(e - _SAT, 0.0)
    s = np.minimum(e, _SAT) + np.log1p(over)
    d1 = 1.0 / (1.0 + over)
    d2 = np.where(e > _SAT, -d1 * d1, 0.0)
    return s, d1, d2


def _g_parts(x, u, v, A, second: bool = False) -> dict:
    """Value of g and its partial derivatives, evaluated in the log domain."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    a, b = np.log(u), np.log(v)

    sp, dp1, dp2 = _expo(x * a)
    sq, dq1, dq2 = _expo(-x * b)
    P, Q = np.exp(sp), np.exp(sq)
    Pe, Qe = P * dp1, Q * dq1
    Px, Qx = Pe * a, -Qe * b
    Pu, Qv = Pe * x / u, -Qe * x / v

    out = {
        "g": x * (P + Q) / A + x,
        "g1": (P + Q) / A + 1.0 + x * (Px + Qx) / A,
        "gu": x * Pu / A,
        "gv": x * Qv / A,
    }
    if second:
        Pee, Qee = P * (dp1 * dp1 + dp2), Q * (dq1 * dq1 + dq2)
        Pxx, Qxx = Pee * a * a, Qee * b * b
        Pxu = Pee * a * x / u + Pe / u
        Qxv = (Qee * b * x - Qe) / v
        out["g2"] = 2.0 * (Px + Qx) / A + x * (Pxx + Qxx) / A
        out["g1u"] = Pu / A + x * Pxu / A
        out["g1v"] = Qv / A + x * Qxv / A
    return out


def _tail_args(tail) -> tuple:
    if isinstance(tail, TailParams):
        return tail.u, tail.v
    u, v = tail
    return u, v


def g(x, tail=TailParams(), A: float = A_DEFAULT):
    """The tail transform; ``tail`` is a TailParams or a (u, v) pair of arrays."""
    u, v = _tail_args(tail)
    return _g_parts(x, u, v, A)["g"]


def g_prime(x, tail=TailParams(), A: float = A_DEFAULT):
    u, v = _tail_args(tail)
    return _g_parts(x, u, v, A)["g1"]


def g_inverse(y, tail=TailParams(), A: float = A_DEFAULT, tol: float = 1e-10,
              max_iter: int = 200):
    """Solve g(x) = y by bracket doubling from [-1, 1] then safeguarded Newton.

    Convergence is declared when |g(x) - y| <= tol * max(1, |y|).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    u, v = _tail_args(tail)
    y, u, v = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(u, dtype=float),
                                  np.asarray(v, dtype=float))
    scalar = y.ndim == 0
    y, u, v = np.atleast_1d(y).astype(float), np.atleast_1d(u), np.atleast_1d(v)
    if not np.isfinite(y).all():
        raise ValueError("g_inverse: target contains non-finite values")

    lo = -np.ones_like(y)
    hi = np.ones_like(y)
    for _ in range(2000):
        low_bad = _g_parts(lo, u, v, A)["g"] > y
        high_bad = _g_parts(hi, u, v, A)["g"] < y
        if not (low_bad.any() or high_bad.any()):
            break
        lo = np.where(low_bad, 2.0 * lo, lo)
        hi = np.where(high_bad, 2.0 * hi, hi)
    else:
        raise ValueError("g_inverse: bracket expansion failed")

    thresh = tol * np.maximum(1.0, np.abs(y))
    x = np.clip(y / g_prime(0.0, (u, v), A), lo, hi)
    for _ in range(max_iter):
        parts = _g_parts(x, u, v, A)
        f = parts["g"] - y
        done = (np.abs(f) <= thresh) | (hi - lo <= 4e-16 * np.maximum(1.0, np.abs(x)))
        if done.all():
            break
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - f / parts["g1"]
        bad = ~((step > lo) & (step < hi))
        x = np.where(done, x, np.where(bad, 0.5 * (lo + hi), step))
    return float(x[0]) if scalar else x


# -- differentiable versions ------------------------------------------------

def g_t(x, u, v, A: float = A_DEFAULT) -> ad.Tensor:
    x, u, v = ad.as_tensor(x), ad.as_tensor(u), ad.as_tensor(v)
    p = _g_parts(x.data, u.data, v.data, A)
    return ad.custom("g", p["g"], (x, u, v),
                     lambda gr: (gr * p["g1"], gr * p["gu"], gr * p["gv"]))


def g_prime_t(x, u, v, A: float = A_DEFAULT) -> ad.Tensor:
    x, u, v = ad.as_tensor(x), ad.as_tensor(u), ad.as_tensor(v)
    p = _g_parts(x.data, u.data, v.data, A, second=True)
    return ad.custom("g_prime", p["g1"], (x, u, v),
                     lambda gr: (gr * p["g2"], gr * p["g1u"], gr * p["g1v"]))


def g_inverse_t(y, u, v, A: float = A_DEFAULT) -> ad.Tensor:
    """Inverse transform with implicit-function gradients."""
    y, u, v = ad.as_tensor(y), ad.as_tensor(u), ad.as_tensor(v)
    z = g_inverse(y.data, (u.data, v.data), A)
    p = _g_parts(z, u.data, v.data, A)
    inv = 1.0 / p["g1"]
    return ad.custom("g_inverse", z, (y, u, v),
                     lambda gr: (gr * inv, -gr * p["gu"] * inv, -gr * p["gv"] * inv))


def market_nll_t(y, alpha, beta, u, v, A: float = A_DEFAULT) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-sample negative log-likelihood of market returns and the latent factor."""
    z = g_inverse_t((ad.as_tensor(y) - alpha) / beta, u, v, A)
    nll = ad.log(beta) + ad.log(g_prime_t(z, u, v, A)) + 0.5 * ad.square(z) + _HALF_LOG_2PI
    return nll, z


def stock_nll_t(y, z_m, alpha, beta, gamma, u_m, v_m, u, v,
                A: float = A_DEFAULT) -> ad.Tensor:
    """Per-sample quasi-NLL of one stock given the realized market factor."""
    resid = (ad.as_tensor(y) - alpha - beta * g_t(z_m, u_m, v_m, A)) / gamma
    z = g_inverse_t(resid, u, v, A)
    return ad.log(gamma) + ad.log(g_prime_t(z, u, v, A)) + 0.5 * ad.square(z) + _HALF_LOG_2PI


# -- likelihoods --------------------------------------------------------------

def _log_phi(z):
    return -0.5 * np.square(z) - _HALF_LOG_2PI


def latent_market(y, theta: MarketTheta, tail: TailParams, A: float = A_DEFAULT):
    """Realized latent market factor g^{-1}((y - alpha) / beta)."""
    return g_inverse((np.asarray(y, dtype=float) - theta.alpha) / theta.beta, tail, A)


def market_loglik(y, theta: MarketTheta, tail: TailParams, A: float = A_DEFAULT):
    if not theta.beta > 0:
        raise ValueError("beta_M must be positive")
    z = latent_market(y, theta, tail, A)
    return -np.log(theta.beta * g_prime(z, tail, A)) + _log_phi(z)


def stock_cond_loglik(y, z_m, theta: StockTheta, tail_m: TailParams, tail_i: TailParams,
                      A: float = A_DEFAULT):
    if not theta.gamma > 0:
        raise ValueError("gamma_i must be positive")
    resid = (np.asarray(y, dtype=float) - theta.alpha - theta.beta * g(z_m, tail_m, A)) / theta.gamma
    z = g_inverse(resid, tail_i, A)
    return -np.log(theta.gamma * g_prime(z, tail_i, A)) + _log_phi(z)


# -- simulation ---------------------------------------------------------------

def _simulate_block(model: ForecastedFactorModel, rows: int, seed_seq) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    z = rng.standard_normal((rows, model.n_stocks + 1))
    zm = z[:, :1]
    ym = model.market.alpha + model.market.beta * g(zm[:, 0], model.tail_m, model.A)
    gm = g(zm, (model.tail_im[:, 0], model.tail_im[:, 1]), model.A)
    gi = g(z[:, 1:], (model.tail_i[:, 0], model.tail_i[:, 1]), model.A)
    return ym, model.alpha + model.beta * gm + model.gamma * gi


def simulate(model: ForecastedFactorModel, n: int, seed, workers: int = 1) -> ScenarioMatrix:
    """Draw ``n`` joint one-month scenarios from the factor model.

    Rows are produced in fixed-size blocks, each with its own child stream of
    ``seed``, so the output does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    sizes = [_SIM_BLOCK] * (n // _SIM_BLOCK)
    if n % _SIM_BLOCK:
        sizes.append(n % _SIM_BLOCK)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _simulate_block(model, *a), zip(sizes, seqs)))
    else:
        parts = [_simulate_block(model, s, q) for s, q in zip(sizes, seqs)]
    market = np.concatenate([p[0] for p in parts])
    returns = np.vstack([p[1] for p in parts])
    return ScenarioMatrix(returns, model.tickers, market)


def empirical_mean(scen: ScenarioMatrix | np.ndarray) -> np.ndarray:
    arr = scen.returns if isinstance(scen, ScenarioMatrix) else np.atleast_2d(scen)
    if arr.shape[0] < 1:
        raise ValueError("need at least one scenario")
    return arr.mean(axis=0)
