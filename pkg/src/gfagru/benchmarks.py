"""Benchmark strategies: equal weight, expanding-window scenario sets, and a
single-factor DCC model with GARCH(1,1) volatilities.

GARCH and DCC recursions are first-order linear filters, evaluated with
``scipy.signal.lfilter``.  Both are fitted by quasi-maximum likelihood over a
reparameterization that keeps a + b < 1 by construction:
a = p * s, b = p * (1 - s), with p = 0.999 * sigmoid(.) and s = sigmoid(.).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, signal
from scipy.special import expit, logit

from .data import HORIZON
from .genfactor import ScenarioMatrix

_PMAX = 0.999
# short monthly histories (a few years) must still be fittable
MIN_GARCH_OBS = 10


class FitError(RuntimeError):
    """Estimation failed or the input is degenerate."""


def equal_weight(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one asset")
    return np.full(n, 1.0 / n)


def monthly_returns(prices: np.ndarray, end: int, horizon: int = HORIZON) -> np.ndarray:
    """Non-overlapping horizon returns whose last block ends at row ``end``,
    in chronological order (one row per block)."""
    p = np.asarray(prices, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    count = end // horizon
    if count < 1 or end >= p.shape[0]:
        raise ValueError(f"no complete block ends at row {end}")
    ends = end - horizon * np.arange(count)[::-1]
    return p[ends] / p[ends - horizon] - 1.0


def static_saa_scenarios(history: np.ndarray, tickers: Sequence[str] = ()) -> ScenarioMatrix:
    """Every monthly return row observed so far, used as equiprobable scenarios."""
    h = np.atleast_2d(np.asarray(history, dtype=float))
    if h.shape[0] < 1:
        raise ValueError("history is empty")
    return ScenarioMatrix(h.copy(), tuple(tickers))


# -- GARCH(1,1) ------------------------------------------------------------------

@dataclass(frozen=True)
class GarchParams:
    omega: float
    a: float
    b: float

    def __post_init__(self):
        if not self.omega > 0 or self.a < 0 or self.b < 0 or not self.a + self.b < 1:
            raise ValueError(f"invalid GARCH parameters {self}")

    def variance_path(self, series: np.ndarray, initial: float | None = None) -> np.ndarray:
        """sigma^2_1..sigma^2_{L+1}; the last entry is the one-step forecast."""
        r = np.asarray(series, dtype=float)
        s1 = float(np.var(r)) if initial is None else initial
        drive = np.concatenate([[s1], self.omega + self.a * r * r])
        return signal.lfilter([1.0], [1.0, -self.b], drive)

    def forecast(self, last_return: float, last_variance: float) -> float:
        return self.omega + self.a * last_return ** 2 + self.b * last_variance


def _ab(p_raw, s_raw):
    p = _PMAX * expit(p_raw)
    s = expit(s_raw)
    return p * s, p * (1.0 - s)


def _garch_nll(theta, r2, s1):
    omega = math.exp(theta[0])
    a, b = _ab(theta[1], theta[2])
    drive = np.concatenate([[s1], omega + a * r2[:-1]])
    var = signal.lfilter([1.0], [1.0, -b], drive)
    if not (var > 0).all():
        return 1e100
    return 0.5 * float(np.sum(np.log(var) + r2 / var))


def fit_garch(series) -> GarchParams:
    """Gaussian quasi-MLE of sigma^2_t = omega + a r^2_{t-1} + b sigma^2_{t-1},
    started at the sample variance.  ``series`` should be de-meaned."""
    r = np.asarray(series, dtype=float)
    if r.ndim != 1 or r.shape[0] < MIN_GARCH_OBS:
        raise FitError(f"GARCH fit needs a 1-D series of length >= {MIN_GARCH_OBS}")
    if not np.isfinite(r).all():
        raise FitError("GARCH input contains non-finite values")
    s1 = float(np.var(r))
    if not s1 > 0:
        raise FitError("GARCH input has zero variance")
    r2 = r * r
    best = None
    for persist, share in ((0.05, 0.5), (0.5, 0.2), (0.9, 0.1), (0.98, 0.08)):
        x0 = [math.log(s1 * (1 - persist)), logit(persist / _PMAX), logit(share)]
        res = optimize.minimize(_garch_nll, x0, args=(r2, s1), method="L-BFGS-B",
                                bounds=[(math.log(s1) - 25, math.log(s1) + 5), (-15, 15), (-15, 15)])
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("GARCH optimizer failed from every start")
    a, b = _ab(best.x[1], best.x[2])
    return GarchParams(math.exp(best.x[0]), float(a), float(b))


# -- DCC -------------------------------------------------------------------------

@dataclass(frozen=True)
class DccParams:
    a: float
    b: float
    gamma: np.ndarray  # (N,) off-diagonal of each market-stock Gamma_i

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or not self.a + self.b < 1:
            raise ValueError(f"invalid DCC dynamics a={self.a}, b={self.b}")
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if (np.abs(g) >= 1).any():
            raise FitError("Gamma_i is not positive definite")
        object.__setattr__(self, "gamma", g)


def dcc_q_path(a: float, b: float, gamma, e_m, e_s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q11, Q22, Q12 paths (L+1, N) for residual pairs; Q_1 = Gamma and the
    last row is the one-step-ahead matrix."""
    e_m = np.asarray(e_m, dtype=float)
    e_s = np.atleast_2d(np.asarray(e_s, dtype=float).T).T
    gamma = np.atleast_1d(gamma)
    L, N = e_s.shape
    k = 1.0 - a - b

    def run(start, base, x):
        drive = np.vstack([start[None, :], k * base[None, :] + a * x])
        return signal.lfilter([1.0], [1.0, -b], drive, axis=0)

    ones = np.ones(N)
    q11 = run(ones, ones, np.repeat((e_m * e_m)[:, None], N, axis=1))
    q22 = run(ones, ones, e_s * e_s)
    q12 = run(gamma, gamma, e_m[:, None] * e_s)
    return q11, q22, q12


def dcc_rho_path(params: DccParams, e_m, e_s) -> np.ndarray:
    q11, q22, q12 = dcc_q_path(params.a, params.b, params.gamma, e_m, e_s)
    return q12 / np.sqrt(q11 * q22)


def _dcc_nll(theta, e_m, e_s, gamma):
    a, b = _ab(theta[0], theta[1])
    q11, q22, q12 = dcc_q_path(a, b, gamma, e_m, e_s)
    rho = (q12 / np.sqrt(q11 * q22))[:-1]
    one_m = 1.0 - rho * rho
    if not (one_m > 0).all():
        return 1e100
    em = e_m[:, None]
    quad = (em * em - 2 * rho * em * e_s + e_s * e_s) / one_m
    return 0.5 * float(np.sum(np.log(one_m) + quad - em * em - e_s * e_s))


def fit_dcc(e_m, e_s) -> tuple[DccParams, np.ndarray]:
    """Two-stage fit: Gamma_i from sample correlations, shared (a, b) by
    pooled quasi-likelihood.  Returns the parameters and the rho path (L+1, N)."""
    e_m = np.asarray(e_m, dtype=float)
    e_s = np.atleast_2d(np.asarray(e_s, dtype=float).T).T
    if e_s.shape[0] != e_m.shape[0] or e_m.shape[0] < 3:
        raise FitError("residual pairs must align and have at least three rows")
    gamma = np.array([np.corrcoef(e_m, e_s[:, i])[0, 1] for i in range(e_s.shape[1])])
    if not np.isfinite(gamma).all() or (np.abs(gamma) >= 1).any():
        raise FitError("Gamma_i is not positive definite")
    best = None
    for persist, share in ((0.05, 0.5), (0.5, 0.1), (0.95, 0.05)):
        res = optimize.minimize(_dcc_nll, [logit(persist / _PMAX), logit(share)],
                                args=(e_m, e_s, gamma), method="L-BFGS-B",
                                bounds=[(-15, 15), (-15, 15)])
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("DCC optimizer failed from every start")
    a, b = _ab(*best.x)
    params = DccParams(float(a), float(b), gamma)
    return params, dcc_rho_path(params, e_m, e_s)


@dataclass
class DccForecast:
    sigma_m: float
    sigma: np.ndarray
    rho: np.ndarray
    mean_m: float
    means: np.ndarray

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        self.means = np.atleast_1d(np.asarray(self.means, dtype=float))
        if not self.sigma_m > 0 or (self.sigma <= 0).any():
            raise ValueError("volatilities must be positive")
        if (np.abs(self.rho) > 1).any():
            raise ValueError("correlations must lie in [-1, 1]")


def dcc_simulate(fc: DccForecast, n: int, seed, tickers: Sequence[str] = ()) -> ScenarioMatrix:
    """Gaussian single-factor draws r_i = m_i + sigma_i (rho_i Z_M + sqrt(1 - rho_i^2) Z_i)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, fc.sigma.shape[0] + 1))
    zm = z[:, :1]
    market = fc.mean_m + fc.sigma_m * zm[:, 0]
    stocks = fc.means + fc.sigma * (fc.rho * zm + np.sqrt(np.clip(1 - fc.rho ** 2, 0, None)) * z[:, 1:])
    return ScenarioMatrix(stocks, tuple(tickers), market)


@dataclass
class FactorDcc:
    """DCC-MM: GARCH(1,1) per series and one shared DCC dynamic, fitted once
    on a training block of monthly returns and filtered forward."""

    garch_m: GarchParams
    garch_s: list[GarchParams]
    dcc: DccParams

    @classmethod
    def fit(cls, market: np.ndarray, stocks: np.ndarray) -> "FactorDcc":
        market = np.asarray(market, dtype=float)
        stocks = np.atleast_2d(np.asarray(stocks, dtype=float).T).T
        dm = market - market.mean()
        ds = stocks - stocks.mean(axis=0)
        gm = fit_garch(dm)
        gs = [fit_garch(ds[:, i]) for i in range(ds.shape[1])]
        e_m = dm / np.sqrt(gm.variance_path(dm)[:-1])
        e_s = np.column_stack([ds[:, i] / np.sqrt(g.variance_path(ds[:, i])[:-1]) for i, g in enumerate(gs)])
        dcc, _ = fit_dcc(e_m, e_s)
        return cls(gm, gs, dcc)

    def forecast(self, market: np.ndarray, stocks: np.ndarray) -> DccForecast:
        """One-step-ahead forecast given all monthly history so far; means
        are expanding-window sample means."""
        market = np.asarray(market, dtype=float)
        stocks = np.atleast_2d(np.asarray(stocks, dtype=float).T).T
        mm, ms = market.mean(), stocks.mean(axis=0)
        dm, ds = market - mm, stocks - ms
        vm = self.garch_m.variance_path(dm)
        vs = np.column_stack([g.variance_path(ds[:, i]) for i, g in enumerate(self.garch_s)])
        e_m = dm / np.sqrt(vm[:-1])
        e_s = ds / np.sqrt(vs[:-1])
        rho = dcc_rho_path(self.dcc, e_m, e_s)[-1]
        return DccForecast(math.sqrt(vm[-1]), np.sqrt(vs[-1]), rho, float(mm), ms)

    def to_dict(self, tickers=None) -> dict:
        tickers = list(tickers) if tickers is not None else [f"S{i}" for i in range(len(self.garch_s))]
        garch = lambda g: {"omega": g.omega, "a": g.a, "b": g.b}
        return {"garch_market": garch(self.garch_m),
                "garch_stocks": {t: garch(g) for t, g in zip(tickers, self.garch_s)},
                "dcc": {"a": self.dcc.a, "b": self.dcc.b,
                        "gamma": {t: float(g) for t, g in zip(tickers, self.dcc.gamma)}}}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorDcc":
        tickers = list(d["garch_stocks"])
        return cls(GarchParams(**d["garch_market"]), [GarchParams(**d["garch_stocks"][t]) for t in tickers],
                   DccParams(d["dcc"]["a"], d["dcc"]["b"], np.array([d["dcc"]["gamma"][t] for t in tickers])))
