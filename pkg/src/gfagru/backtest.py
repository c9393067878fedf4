"""Monthly rebalancing backtest, performance metrics and VaR coverage tests."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.special import xlogy
from scipy.stats import chi2

from . import benchmarks as bm
from . import genfactor as gf
from .cvar import CvarProblem, empirical_cvar, solve
from .data import HORIZON, Split

log = logging.getLogger(__name__)

METRIC_NAMES = ("AV", "SD", "IR", "MD", "ES", "SK", "CR", "RR")


def derived_seed(*key: int) -> int:
    """Independent integer seed for a (base seed, ...) key."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


# -- metrics ----------------------------------------------------------------------

@dataclass
class Metrics:
    AV: float
    SD: float
    IR: float  # nan when SD == 0
    MD: float
    ES: float
    SK: float
    CR: float
    RR: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in METRIC_NAMES])


def max_drawdown(returns) -> float:
    """Largest relative decline of the compounded wealth curve, which starts at 1."""
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])
    peak = np.maximum.accumulate(wealth)
    return float(np.max((peak - wealth) / peak))


def _safe_div(a: float, b: float) -> float:
    return a / b if b != 0 else math.nan


def metrics(returns, level: float = 0.95, rr_numerator: str = "body") -> Metrics:
    """Annualized AV, SD, ES (x12) and un-annualized IR, CR, RR of monthly returns.

    RR numerator: "body" is the mean return over months whose loss is at or
    below the 95% VaR; "upper" is the mean of the best (1 - level) share of months.
    """
    R = np.asarray(returns, dtype=float).ravel()
    L = R.shape[0]
    if L < 2:
        raise ValueError("metrics need at least two returns")
    mean = float(R.mean())
    sd = math.sqrt(float(R.var(ddof=1)) * 12.0)
    if sd < 1e-15:
        sd = 0.0
    cvar, var = empirical_cvar(-R, level)
    dev = R - mean
    m2, m3 = float(np.mean(dev ** 2)), float(np.mean(dev ** 3))
    sk = m3 / m2 ** 1.5 if m2 > 1e-30 else math.nan
    if rr_numerator == "body":
        top = float(R[-R <= var].mean())
    elif rr_numerator == "upper":
        k = max(1, math.ceil((1.0 - level) * L - 1e-9))
        top = float(np.sort(R)[-k:].mean())
    else:
        raise ValueError(f"unknown RR numerator {rr_numerator!r}")
    return Metrics(AV=mean * 12.0, SD=sd, IR=_safe_div(mean * 12.0, sd) if sd > 0 else math.nan,
                   MD=max_drawdown(R), ES=cvar * 12.0, SK=sk,
                   CR=_safe_div(mean, cvar), RR=_safe_div(top, cvar))


# -- coverage tests ---------------------------------------------------------------

@dataclass(frozen=True)
class CoverageResult:
    violations: int
    L: int
    lr_pof: float
    lr_cci: float
    p_pof: float
    p_cci: float
    p_cc: float


def _bern_ll(k, n, p):
    # k log p + (n - k) log(1 - p) with 0 log 0 = 0
    return xlogy(k, p) + xlogy(n - k, 1.0 - p)


def coverage_tests(violations, p: float) -> CoverageResult:
    """POF, Markov independence and combined coverage likelihood-ratio tests."""
    I = np.asarray(violations).astype(bool).ravel()
    L = I.shape[0]
    if L < 2:
        raise ValueError("coverage tests need at least two observations")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    x = int(I.sum())
    lr_pof = max(0.0, -2.0 * (_bern_ll(x, L, p) - _bern_ll(x, L, x / L)))

    prev, cur = I[:-1], I[1:]
    n01 = int(np.sum(~prev & cur))
    n00 = int(np.sum(~prev & ~cur))
    n11 = int(np.sum(prev & cur))
    n10 = int(np.sum(prev & ~cur))
    pi0 = n01 / (n00 + n01) if n00 + n01 else 0.0
    pi1 = n11 / (n10 + n11) if n10 + n11 else 0.0
    pi = (n01 + n11) / (L - 1)
    lr_cci = max(0.0, -2.0 * (_bern_ll(n01 + n11, L - 1, pi)
                              - _bern_ll(n01, n00 + n01, pi0) - _bern_ll(n11, n10 + n11, pi1)))
    return CoverageResult(x, L, float(lr_pof), float(lr_cci), float(chi2.sf(lr_pof, 1)),
                          float(chi2.sf(lr_cci, 1)), float(chi2.sf(lr_pof + lr_cci, 2)))


@dataclass
class VarSeries:
    var: np.ndarray  # (L, K) VaR of the loss per date and asset
    columns: tuple[str, ...]
    violations: np.ndarray | None = None  # (L, K) realized return < -VaR


def var_forecast_series(models: Sequence[gf.ForecastedFactorModel], q: float, n: int, seed,
                        realized: np.ndarray | None = None, include_market: bool = True) -> VarSeries:
    """Per-date empirical q-VaR of simulated monthly losses for every stock
    (and the market factor).  ``realized`` has the same column layout."""
    if not models:
        raise ValueError("no forecasts given")
    rows = []
    for k, model in enumerate(models):
        scen = gf.simulate(model, n, derived_seed(seed, k))
        cols = [scen.returns] + ([scen.market[:, None]] if include_market else [])
        losses = -np.hstack(cols)
        rows.append([empirical_cvar(losses[:, j], q)[1] for j in range(losses.shape[1])])
    var = np.array(rows)
    names = tuple(models[0].tickers) or tuple(f"S{i}" for i in range(models[0].n_stocks))
    names = names + (("MARKET",) if include_market else ())
    viol = None
    if realized is not None:
        realized = np.asarray(realized, dtype=float)
        if realized.shape != var.shape:
            raise ValueError(f"realized returns must have shape {var.shape}")
        viol = realized < -var
    return VarSeries(var, names, viol)


# -- strategies -------------------------------------------------------------------

@dataclass
class BacktestData:
    stock_prices: np.ndarray  # (R, N)
    market_prices: np.ndarray  # (R,)
    split: Split
    tickers: tuple[str, ...] = ()
    dates: np.ndarray | None = None

    def __post_init__(self):
        self.stock_prices = np.asarray(self.stock_prices, dtype=float)
        self.market_prices = np.asarray(self.market_prices, dtype=float).ravel()
        if self.stock_prices.shape[0] != self.market_prices.shape[0]:
            raise ValueError("stock and market prices must share rows")
        if self.split.n_rows != self.stock_prices.shape[0]:
            raise ValueError("split does not match the price table")
        if self.split.rebalance_anchors().shape[0] < 1:
            raise ValueError("test segment is too short for one rebalance")

    @property
    def n_assets(self) -> int:
        return self.stock_prices.shape[1]

    def anchors(self) -> np.ndarray:
        return self.split.rebalance_anchors()

    def realized(self, anchor: int) -> np.ndarray:
        p = self.stock_prices
        return p[anchor + HORIZON] / p[anchor] - 1.0

    def history(self, anchor: int) -> tuple[np.ndarray, np.ndarray]:
        """Non-overlapping monthly (market, stocks) returns ending at ``anchor``."""
        m = bm.monthly_returns(self.market_prices, anchor)[:, 0]
        return m, bm.monthly_returns(self.stock_prices, anchor)


class Strategy:
    name = "base"
    stochastic = False

    def prepare(self, data: BacktestData) -> None:
        pass

    def scenarios(self, data: BacktestData, k: int, anchor: int, n: int, seed) -> gf.ScenarioMatrix | None:
        """Scenario set for rebalance k; None means hold equal weights."""
        raise NotImplementedError


class EqualWeight(Strategy):
    name = "EW"

    def scenarios(self, data, k, anchor, n, seed):
        return None


class StaticSAA(Strategy):
    name = "SAA"

    def scenarios(self, data, k, anchor, n, seed):
        return bm.static_saa_scenarios(data.history(anchor)[1], data.tickers)


class DccMM(Strategy):
    """Factor DCC fitted once on monthly training returns, filtered forward."""
    name = "DCC-MM"
    stochastic = True

    def __init__(self):
        self.model: bm.FactorDcc | None = None

    def prepare(self, data):
        m, s = data.history(data.split.split - 1)
        self.model = bm.FactorDcc.fit(m, s)

    def scenarios(self, data, k, anchor, n, seed):
        fc = self.model.forecast(*data.history(anchor))
        return bm.dcc_simulate(fc, n, seed, data.tickers)


class GfAgru(Strategy):
    """Simulates from precomputed per-rebalance factor-model forecasts."""
    stochastic = True

    def __init__(self, forecasts: Sequence[gf.ForecastedFactorModel], name: str = "GF-AGRU"):
        self.forecasts = list(forecasts)
        self.name = name

    def prepare(self, data):
        if len(self.forecasts) != data.anchors().shape[0]:
            raise ValueError(f"{self.name}: {len(self.forecasts)} forecasts for "
                             f"{data.anchors().shape[0]} rebalance dates")

    def scenarios(self, data, k, anchor, n, seed):
        return gf.simulate(self.forecasts[k], n, seed)


# -- engine -----------------------------------------------------------------------

EW_TARGET = "ew"


def target_label(target) -> str:
    return "R_ew" if target == EW_TARGET else f"{float(target):g}"


def ew_target(data: BacktestData, anchor: int) -> float:
    """Expanding mean of realized equal-weight monthly returns up to ``anchor``."""
    return float(data.history(anchor)[1].mean(axis=1).mean())


@dataclass
class StrategyRun:
    strategy: str
    target: object
    q: float
    n: int
    returns: np.ndarray  # (reps, L)
    weights: np.ndarray  # (reps, L, N)
    fallbacks: int
    metrics: list[Metrics] = field(default_factory=list)

    @property
    def repetitions(self) -> int:
        return self.returns.shape[0]

    def mean_metrics(self) -> np.ndarray:
        return np.mean([m.as_array() for m in self.metrics], axis=0)

    def sd_metrics(self) -> np.ndarray:
        arr = np.array([m.as_array() for m in self.metrics])
        return arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.full(arr.shape[1], math.nan)


def _one_repetition(strategy: Strategy, data: BacktestData, targets, q, n, seed, rep):
    anchors = data.anchors()
    N = data.n_assets
    L = anchors.shape[0]
    W = np.zeros((len(targets), L, N))
    fallbacks = np.zeros(len(targets), dtype=int)
    for k, a in enumerate(anchors):
        scen = strategy.scenarios(data, k, int(a), n, derived_seed(seed, rep, k))
        for j, target in enumerate(targets):
            if scen is None:
                W[j, k] = bm.equal_weight(N)
                continue
            mu = scen.returns.mean(axis=0)
            R0 = float(np.clip(ew_target(data, int(a)), mu.min(), mu.max())) if target == EW_TARGET else float(target)
            sol = solve(CvarProblem(scen.returns, q, R0, mu))
            if sol.status != "optimal":
                log.info("%s: infeasible target %s at rebalance %d, holding equal weights",
                         strategy.name, target_label(target), k)
                fallbacks[j] += 1
                W[j, k] = bm.equal_weight(N)
            else:
                W[j, k] = sol.weights
    Y = np.array([data.realized(int(a)) for a in anchors])
    return W, np.einsum("tln,ln->tl", W, Y), fallbacks


def run_backtest(strategy: Strategy, data: BacktestData, targets: Sequence, q: float, n: int,
                 seed: int = 0, repetitions: int = 1, workers: int = 1,
                 rr_numerator: str = "body") -> list[StrategyRun]:
    """Rolling 21-day rebalancing for every target; one StrategyRun per target.

    Scenarios are drawn once per (repetition, date) and shared by all
    targets.  Deterministic strategies run a single repetition.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    targets = list(targets)
    if isinstance(strategy, EqualWeight):
        targets = targets[:1] or [EW_TARGET]
    if not targets:
        raise ValueError("at least one target is required")
    strategy.prepare(data)
    reps = repetitions if strategy.stochastic else 1
    if workers > 1 and reps > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda r: _one_repetition(strategy, data, targets, q, n, seed, r), range(reps)))
    else:
        out = [_one_repetition(strategy, data, targets, q, n, seed, r) for r in range(reps)]
    runs = []
    for j, target in enumerate(targets):
        returns = np.array([o[1][j] for o in out])
        run = StrategyRun(strategy.name, None if isinstance(strategy, EqualWeight) else target, q, n,
                          returns, np.array([o[0][j] for o in out]), int(sum(o[2][j] for o in out)))
        run.metrics = [metrics(r, rr_numerator=rr_numerator) for r in returns]
        runs.append(run)
    return runs


def report_rows(runs: Sequence[StrategyRun]) -> list[dict]:
    """One row per strategy x target x q with mean metrics and their dispersion."""
    rows = []
    for run in runs:
        row = {"strategy": run.strategy,
               "target": "" if run.target is None else target_label(run.target),
               "q": run.q, "n": run.n, "repetitions": run.repetitions, "fallbacks": run.fallbacks}
        for name, mean, sd in zip(METRIC_NAMES, run.mean_metrics(), run.sd_metrics()):
            row[name] = mean
            row[f"{name}_sd"] = sd
        rows.append(row)
    return rows


def wealth_curve(returns) -> np.ndarray:
    """Compounded wealth after each month, starting from 1."""
    return np.cumprod(1.0 + np.asarray(returns, dtype=float))


def metric_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(Metrics))
