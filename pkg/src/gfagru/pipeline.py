"""End-to-end orchestration: price table -> samples -> ensembles -> forecasts."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import genfactor as gf
from . import trainer as tr
from .data import HORIZON, DataError, PriceTable, Split, build_samples

log = logging.getLogger(__name__)


@dataclass
class MarketData:
    dates: np.ndarray
    tickers: tuple[str, ...]
    market: np.ndarray  # (R,)
    stocks: np.ndarray  # (R, N)

    @classmethod
    def from_table(cls, table: PriceTable, market_ticker: str = "MARKET") -> "MarketData":
        if market_ticker not in table.tickers:
            raise DataError(f"market column {market_ticker!r} not found")
        tickers = tuple(t for t in table.tickers if t != market_ticker)
        if not tickers:
            raise DataError("no stock columns besides the market")
        return cls(table.dates, tickers, table.column(market_ticker), table.select(tickers).prices)

    @property
    def n_rows(self) -> int:
        return self.market.shape[0]


def member_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def _stock_seed(member_seed: int, i: int) -> int:
    return int(np.random.SeedSequence([member_seed, i + 1]).generate_state(1)[0])


def fit_samples(md: MarketData, sp: Split, T: int, stock: int | None = None):
    """(train, val) SampleSets for the market (stock=None) or one stock column."""
    sp_prices = None if stock is None else md.stocks[:, stock]
    train = build_samples(md.market, sp_prices, sp.train_anchors(T), T)
    va = sp.val_anchors(T)
    val = build_samples(md.market, sp_prices, va, T) if len(va) and sp.val_start < sp.split else None
    return train, val


def train_ensemble(md: MarketData, sp: Split, cfg: tr.TrainConfig, seed: int, workers: int = 1):
    """B_r market fits and, paired with each, one fit per stock.

    Stock member b is trained on the latent market factors of market member b.
    Returns (market models, {ticker: models}, member seeds).
    """
    seeds = member_seeds(seed, cfg.ensemble)
    m_train, m_val = fit_samples(md, sp, cfg.T)
    stock_sets = [fit_samples(md, sp, cfg.T, i) for i in range(len(md.tickers))]
    n_tr = len(m_train)
    market_models, stock_models = [], {t: [] for t in md.tickers}
    for b, s in enumerate(seeds):
        log.info("ensemble member %d/%d: market", b + 1, len(seeds))
        mm = tr.fit_market(m_train, m_val, cfg, s)
        market_models.append(mm)
        z_tr, z_va = mm.z_fit[:n_tr], mm.z_fit[n_tr:]
        jobs = [(st, sv, z_tr, z_va if sv is not None else None, cfg, _stock_seed(s, i))
                for i, (st, sv) in enumerate(stock_sets)]
        for t, m in zip(md.tickers, tr.fit_stocks(jobs, workers)):
            stock_models[t].append(m)
    return market_models, stock_models, seeds


def forecast_path(market_models, stock_models: dict, md: MarketData, anchors: Sequence[int],
                  T: int, A: float = gf.A_DEFAULT) -> list[gf.ForecastedFactorModel]:
    """Ensemble factor-model forecasts at each anchor; uses data before the anchor only."""
    anchors = np.asarray(anchors, dtype=int)
    mX = build_samples(md.market, None, anchors, T, with_labels=False).X
    sX, members = [], []
    for i, t in enumerate(md.tickers):
        if t not in stock_models:
            raise DataError(f"no trained models for ticker {t!r}")
        sX.append(build_samples(md.market, md.stocks[:, i], anchors, T, with_labels=False).X)
        members.append(stock_models[t])
    return tr.ensemble_forecast_path(market_models, members, mX, sX, md.tickers, A)


def realized_monthly(md: MarketData, anchors: Sequence[int], horizon: int = HORIZON) -> np.ndarray:
    """(L, N + 1) realized returns after each anchor; the last column is the market."""
    a = np.asarray(anchors, dtype=int)
    prices = np.column_stack([md.stocks, md.market])
    return prices[a + horizon] / prices[a] - 1.0
