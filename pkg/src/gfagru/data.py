"""Price ingestion, returns, train/validation/test splitting, feature windows
and monthly labels, plus a synthetic price generator with known ground truth.

Index conventions: prices are rows ``0..R-1``; daily return ``r[k]`` is the
move from row ``k`` to row ``k+1``.  An anchor ``t`` is a price row at whose
close a decision is made; its feature window holds the ``T`` returns that end
at row ``t`` (``r[t-T:t]``) and its label is ``p[t+21] / p[t] - 1``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import genfactor as gf

HORIZON = 21


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass
class PriceTable:
    dates: np.ndarray
    tickers: tuple[str, ...]
    prices: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates)
        self.prices = np.atleast_2d(np.asarray(self.prices, dtype=float))
        self.tickers = tuple(self.tickers)
        if self.prices.shape != (len(self.dates), len(self.tickers)):
            raise DataError(f"price matrix shape {self.prices.shape} does not match "
                            f"{len(self.dates)} dates x {len(self.tickers)} tickers")
        if len(set(self.tickers)) != len(self.tickers):
            raise DataError("duplicate ticker columns")
        if len(self.dates) > 1 and not (self.dates[1:] > self.dates[:-1]).all():
            raise DataError("dates must be strictly increasing")
        if not np.isfinite(self.prices).all() or (self.prices <= 0).any():
            raise DataError("prices must be finite and positive")

    @property
    def n_rows(self) -> int:
        return self.prices.shape[0]

    def column(self, ticker: str) -> np.ndarray:
        try:
            return self.prices[:, self.tickers.index(ticker)]
        except ValueError:
            raise DataError(f"ticker {ticker!r} not in table") from None

    def select(self, tickers) -> "PriceTable":
        idx = [self.tickers.index(t) for t in tickers]
        return PriceTable(self.dates, tuple(tickers), self.prices[:, idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *self.tickers])
            for d, row in zip(self.dates, self.prices):
                w.writerow([str(d), *(repr(float(x)) for x in row)])


def read_prices(path, drop_incomplete: bool = True) -> PriceTable:
    """Read a CSV with an ISO date column followed by one column per ticker.

    Tickers with any empty or non-positive cell are dropped when
    ``drop_incomplete`` is set; otherwise such cells raise.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"price file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if len(rows) < 3:
        raise DataError(f"{path}: need a header and at least two dates")
    header, body = rows[0], rows[1:]
    tickers = [h.strip() for h in header[1:]]
    try:
        dates = np.array([np.datetime64(r[0].strip(), "D") for r in body])
    except ValueError as exc:
        raise DataError(f"{path}: bad date ({exc})") from None
    raw = np.full((len(body), len(tickers)), np.nan)
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
        for j, cell in enumerate(r[1:]):
            cell = cell.strip()
            if cell:
                try:
                    raw[i, j] = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {i + 2} column {tickers[j]!r} is not numeric") from None
    ok = np.isfinite(raw).all(axis=0) & (np.nan_to_num(raw, nan=-1.0) > 0).all(axis=0)
    if not ok.all() and not drop_incomplete:
        bad = [t for t, k in zip(tickers, ok) if not k]
        raise DataError(f"{path}: incomplete or non-positive prices for {bad}")
    keep = [j for j in range(len(tickers)) if ok[j]]
    if not keep:
        raise DataError(f"{path}: no ticker has a complete history")
    return PriceTable(dates, tuple(tickers[j] for j in keep), raw[:, keep])


def to_returns(prices) -> np.ndarray:
    """Daily percentage returns p[k+1] / p[k] - 1 along the first axis."""
    p = prices.prices if isinstance(prices, PriceTable) else np.asarray(prices, dtype=float)
    if p.shape[0] < 2:
        raise DataError("need at least two dates to form returns")
    if (p <= 0).any():
        raise DataError("prices must be positive")
    return p[1:] / p[:-1] - 1.0


def monthly_label(prices, t: int, horizon: int = HORIZON):
    p = np.asarray(prices, dtype=float)
    if t < 0 or t + horizon >= p.shape[0]:
        raise DataError(f"label horizon out of range: anchor {t} + {horizon} >= {p.shape[0]} rows")
    return p[t + horizon] / p[t] - 1.0


def _window_rows(r: np.ndarray, t: int, T: int) -> np.ndarray:
    w = r[t - T:t]
    return np.vstack([w, (w - w.mean()) ** 2])


def build_features(market_returns, stock_returns=None, t: int = 0, T: int = 200) -> np.ndarray:
    """Feature window for anchor t: 2 x T (market) or 4 x T (market, stock).

    Rows are the T daily returns ending at row t and their squared deviations
    from the window mean.
    """
    rm = np.asarray(market_returns, dtype=float)
    if T < 1 or t < T or t > rm.shape[0]:
        raise DataError(f"insufficient history for anchor {t} with window {T}")
    out = _window_rows(rm, t, T)
    if stock_returns is not None:
        out = np.vstack([out, _window_rows(np.asarray(stock_returns, dtype=float), t, T)])
    return out


@dataclass
class SampleSet:
    """Feature windows (S, D_in, T), labels (S,) and anchor rows (S,)."""

    X: np.ndarray
    y: np.ndarray
    anchors: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.anchors = np.asarray(self.anchors, dtype=int)
        if self.X.ndim != 3 or self.X.shape[0] != self.y.shape[0] or self.y.shape[0] != self.anchors.shape[0]:
            raise DataError("sample arrays disagree in length")

    def __len__(self) -> int:
        return self.y.shape[0]

    def take(self, idx) -> "SampleSet":
        return SampleSet(self.X[idx], self.y[idx], self.anchors[idx])


def build_samples(market_prices, stock_prices=None, anchors=(), T: int = 200,
                  horizon: int = HORIZON, with_labels: bool = True) -> SampleSet:
    """Windows for each anchor; the label follows the stock if given, else the market."""
    pm = np.asarray(market_prices, dtype=float)
    rm = to_returns(pm)
    ps = None if stock_prices is None else np.asarray(stock_prices, dtype=float)
    rs = None if ps is None else to_returns(ps)
    anchors = np.asarray(anchors, dtype=int)
    d_in = 2 if ps is None else 4
    X = np.empty((len(anchors), d_in, T))
    y = np.full(len(anchors), np.nan)
    target = pm if ps is None else ps
    for k, t in enumerate(anchors):
        X[k] = build_features(rm, rs, int(t), T)
        if with_labels:
            y[k] = monthly_label(target, int(t), horizon)
    return SampleSet(X, y, anchors)


@dataclass(frozen=True)
class Split:
    """Row-level chronological split.

    Training rows ``[0, val_start)``, validation rows ``[val_start, split)``,
    test rows ``[split, n_rows)``.
    """

    n_rows: int
    split: int
    val_start: int

    @property
    def n_test(self) -> int:
        return self.n_rows - self.split

    def train_anchors(self, T: int, horizon: int = HORIZON) -> np.ndarray:
        return np.arange(T, self.val_start - horizon)

    def val_anchors(self, T: int, horizon: int = HORIZON) -> np.ndarray:
        return np.arange(max(T, self.val_start), self.split - horizon)

    def fit_anchors(self, T: int, horizon: int = HORIZON) -> np.ndarray:
        return np.concatenate([self.train_anchors(T, horizon), self.val_anchors(T, horizon)])

    def rebalance_anchors(self, horizon: int = HORIZON) -> np.ndarray:
        """Decision rows for the test period.

        The first decision uses the close of the last training row; each
        holding period covers the next ``horizon`` rows; a trailing partial
        month is dropped.
        """
        count = self.n_test // horizon
        return self.split - 1 + horizon * np.arange(count)


def split(n_rows: int, train_fraction: float = 0.6, val_fraction: float = 0.2,
          split_at: int | None = None, T: int = 0, horizon: int = HORIZON) -> Split:
    """Contiguous train/validation/test split; validation is the last
    floor(val_fraction * train) training rows."""
    if split_at is None:
        if not 0 < train_fraction < 1:
            raise DataError("train fraction must lie in (0, 1)")
        split_at = int(math.floor(train_fraction * n_rows))
    if not 0 <= val_fraction < 1:
        raise DataError("validation fraction must lie in [0, 1)")
    if not 0 < split_at < n_rows:
        raise DataError(f"split row {split_at} outside (0, {n_rows})")
    n_val = int(math.floor(val_fraction * split_at))
    sp = Split(n_rows, split_at, split_at - n_val)
    if len(sp.train_anchors(T, horizon)) < 1:
        raise DataError("training segment too short for the window plus one label horizon")
    if n_val and len(sp.val_anchors(T, horizon)) < 1:
        raise DataError("validation segment too short for one label horizon")
    if sp.n_test < horizon:
        raise DataError("test segment shorter than one holding period")
    return sp


def split_row_for_date(dates, date) -> int:
    """Index of the first row on or after ``date``."""
    d = np.datetime64(date, "D")
    idx = int(np.searchsorted(np.asarray(dates).astype("datetime64[D]"), d))
    return idx


# -- synthetic data -------------------------------------------------------------

def synth_generate(model: gf.ForecastedFactorModel, length: int, seed,
                   regimes: list[tuple[int, gf.ForecastedFactorModel]] | None = None,
                   market_ticker: str = "MARKET", start: str = "2000-01-03",
                   p0: float = 100.0) -> PriceTable:
    """Daily prices driven by a generative factor model with daily-scale
    parameters.

    Simulated values are used as daily log-returns so prices stay positive
    under heavy tails.  ``regimes`` lists (first row, model) pairs that take
    over from ``model`` at the given return row.
    """
    if length < 2:
        raise DataError("need at least two price rows")
    if not model.market.beta > 0 or (model.gamma <= 0).any():
        raise DataError("zero-volatility model")
    n_ret = length - 1
    schedule = [(0, model)] + sorted(regimes or [], key=lambda r: r[0])
    ss = np.random.SeedSequence(seed).spawn(len(schedule))
    logret = np.empty((n_ret, model.n_stocks + 1))
    for k, (first, m) in enumerate(schedule):
        last = schedule[k + 1][0] if k + 1 < len(schedule) else n_ret
        if last <= first:
            continue
        if m.n_stocks != model.n_stocks:
            raise DataError("regime models must share the stock universe")
        seed_k = int(ss[k].generate_state(1)[0])
        sc = gf.simulate(m, last - first, seed_k)
        logret[first:last, 0] = sc.market
        logret[first:last, 1:] = sc.returns
    prices = p0 * np.exp(np.vstack([np.zeros((1, logret.shape[1])), np.cumsum(logret, axis=0)]))
    dates = _business_days(start, length)
    return PriceTable(dates, (market_ticker, *model.tickers), prices)


def _business_days(start: str, count: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(count))


def write_synth(path, table: PriceTable, model: gf.ForecastedFactorModel, seed,
                market_ticker: str = "MARKET") -> Path:
    """Write the price CSV and a ground-truth manifest next to it."""
    path = Path(path)
    table.to_csv(path)
    truth = path.with_suffix(".truth.json")
    truth.write_text(json.dumps({"seed": seed, "market_ticker": market_ticker,
                                 "rows": table.n_rows, "model": model.to_dict()},
                                indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return truth


def synth_truth(n_stocks: int, seed, tails: tuple[float, float] | None = None,
                A: float = gf.A_DEFAULT) -> gf.ForecastedFactorModel:
    """A random daily-scale ground-truth model.

    Tail pairs are drawn from [1.2, 2.2] unless ``tails`` fixes every one.
    """
    if n_stocks < 1:
        raise DataError("need at least one stock")
    rng = np.random.default_rng(seed)

    def tail_pairs(k):
        return np.tile(tails, (k, 1)) if tails is not None else rng.uniform(1.2, 2.2, (k, 2))

    return gf.ForecastedFactorModel(
        market=gf.MarketTheta(3e-4, 6e-3),
        tail_m=gf.TailParams(*tail_pairs(1)[0]),
        alpha=rng.uniform(1e-4, 4e-4, n_stocks),
        beta=rng.uniform(3e-3, 7e-3, n_stocks),
        gamma=rng.uniform(4e-3, 8e-3, n_stocks),
        tail_im=tail_pairs(n_stocks), tail_i=tail_pairs(n_stocks), A=A,
        tickers=tuple(f"S{i:02d}" for i in range(n_stocks)))
