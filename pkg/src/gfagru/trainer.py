"""Two-step fitting of the generative factor model.

The market network is fitted first; its realized latent factors then enter
each stock's conditional likelihood as data.  Every fit alternates two blocks
for ``n_outer`` rounds:

* network block: full-batch RMSProp on the network weights with tails frozen,
  with the validation NLL checked every ``eval_every`` epochs;
* tail block: RMSProp on the tail parameters with the network outputs frozen,
  projecting onto [1, 3] after every step.

Features and labels are standardized with training-row statistics only.  The
network predicts parameters for standardized labels; they are mapped back via
alpha = m + s alpha', beta = s beta', gamma = s gamma'.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agru
from . import autodiff as ad
from . import genfactor as gf
from .agru import AgruParams, HeadSpec
from .autodiff import Tensor
from .data import SampleSet
from .hashing import stable_hash

log = logging.getLogger(__name__)

ABLATIONS = ("full", "naive", "no-attention")


class TrainingError(RuntimeError):
    """Training aborted; ``snapshot`` holds the last good (params, tails)."""

    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    l_fix: float = 1e-2
    l_tv: float = 1e-3
    n_outer: int = 6
    n_fix: int = 2000
    n_tv: int = 2000
    T: int = 200
    val_fraction: float = 0.2
    ensemble: int = 5
    ablation: str = "full"
    hidden_market: int = 4
    hidden_stock: int = 6
    eval_every: int = 100
    patience: int = 5
    tail_init: float = 1.5
    A: float = 4.0
    head_clip: float = 5.0
    head_floor: float = 1e-4
    momentum: float = 0.2
    rho: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("l_fix", "l_tv", "A", "head_clip", "head_floor", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_outer", "T", "ensemble", "hidden_market", "hidden_stock",
                     "eval_every", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("n_fix", "n_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not gf.TAIL_MIN <= self.tail_init <= gf.TAIL_MAX:
            raise ValueError("tail_init must lie in [1, 3]")

    @property
    def naive(self) -> bool:
        return self.ablation == "naive"

    @property
    def use_attention(self) -> bool:
        return self.ablation != "no-attention"

    def to_dict(self) -> dict:
        return asdict(self)

    def head(self, kind: str) -> HeadSpec:
        make = HeadSpec.market if kind == "market" else HeadSpec.stock
        return make(clip=self.head_clip, floor=self.head_floor)


@dataclass
class Normalizer:
    feat_mean: np.ndarray
    feat_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Normalizer":
        mu = X.mean(axis=(0, 2))
        sd = X.std(axis=(0, 2))
        ysd = float(y.std())
        return cls(mu, np.where(sd > 0, sd, 1.0), float(y.mean()), ysd if ysd > 0 else 1.0)

    def features(self, X: np.ndarray) -> np.ndarray:
        return (X - self.feat_mean[None, :, None]) / self.feat_std[None, :, None]

    def labels(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def denormalize(self, theta: np.ndarray) -> np.ndarray:
        out = theta * self.y_std
        out[..., 0] += self.y_mean
        return out

    def to_dict(self) -> dict:
        return {"feat_mean": self.feat_mean.tolist(), "feat_std": self.feat_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["feat_mean"]), np.array(d["feat_std"]), d["y_mean"], d["y_std"])


@dataclass
class FitTrace:
    """Diagnostics of one fit."""

    evals: list[dict] = field(default_factory=list)
    fix_blocks: list[tuple[float, float]] = field(default_factory=list)
    tail_path: list[np.ndarray] = field(default_factory=list)
    block_best: list[float] = field(default_factory=list)
    accepted_val: float = float("nan")
    initial_val: float = float("nan")
    lr_halved: bool = False


@dataclass
class TrainedMarketModel:
    params: AgruParams
    tail: gf.TailParams
    norm: Normalizer
    z_fit: np.ndarray
    fit_anchors: np.ndarray
    use_attention: bool = True
    A: float = gf.A_DEFAULT
    head: HeadSpec = HeadSpec.market()
    trace: FitTrace = field(default_factory=FitTrace)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """De-normalized (alpha_M, beta_M) for raw windows (S, 2, T)."""
        th = agru.predict_theta(self.params, self.head, self.norm.features(np.atleast_3d(X)),
                                self.use_attention)
        return self.norm.denormalize(th)

    def nll(self, samples: SampleSet) -> float:
        """Mean NLL of raw labels under the forecast distributions."""
        th = self.predict(samples.X)
        nll, _ = gf.market_nll_t(samples.y, th[:, 0], th[:, 1], self.tail.u, self.tail.v, self.A)
        return float(nll.data.mean())

    def latent(self, samples: SampleSet) -> np.ndarray:
        th = self.predict(samples.X)
        return gf.g_inverse((samples.y - th[:, 0]) / th[:, 1], self.tail, self.A)


@dataclass
class TrainedStockModel:
    params: AgruParams
    tail_m: gf.TailParams
    tail_i: gf.TailParams
    norm: Normalizer
    use_attention: bool = True
    A: float = gf.A_DEFAULT
    head: HeadSpec = HeadSpec.stock()
    trace: FitTrace = field(default_factory=FitTrace)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """De-normalized (alpha_i, beta_i, gamma_i) for raw windows (S, 4, T)."""
        th = agru.predict_theta(self.params, self.head, self.norm.features(np.atleast_3d(X)),
                                self.use_attention)
        return self.norm.denormalize(th)

    def nll(self, samples: SampleSet, z_m: np.ndarray) -> float:
        th = self.predict(samples.X)
        nll = gf.stock_nll_t(samples.y, z_m, th[:, 0], th[:, 1], th[:, 2],
                             self.tail_m.u, self.tail_m.v, self.tail_i.u, self.tail_i.v, self.A)
        return float(nll.data.mean())


# -- the alternating fit ----------------------------------------------------------

class _Fit:
    def __init__(self, kind: str, train: SampleSet, val: SampleSet | None, cfg: TrainConfig,
                 seed, z_train=None, z_val=None):
        if len(train) == 0:
            raise ValueError("training set is empty")
        self.kind, self.cfg = kind, cfg
        self.head = cfg.head(kind)
        self.norm = Normalizer.fit(train.X, train.y)
        self.Xt, self.yt, self.zt = self.norm.features(train.X), self.norm.labels(train.y), z_train
        if val is not None and len(val):
            self.Xv, self.yv, self.zv = self.norm.features(val.X), self.norm.labels(val.y), z_val
        else:
            self.Xv, self.yv, self.zv = self.Xt, self.yt, self.zt
        d_in = train.X.shape[1]
        n = cfg.hidden_market if kind == "market" else cfg.hidden_stock
        self.params = agru.init_params(d_in, n, self.head.d_out, seed).arrays()
        n_tails = 2 if kind == "market" else 4
        self.tails = np.full(n_tails, 1.0 if cfg.naive else cfg.tail_init)
        self.trace = FitTrace()

    # losses ---------------------------------------------------------------
    def _nll(self, theta, tails, y, z):
        A = self.cfg.A
        t = [tails[k] for k in range(tails.shape[0])]
        if self.kind == "market":
            return gf.market_nll_t(y, theta[:, 0], theta[:, 1], t[0], t[1], A)[0]
        return gf.stock_nll_t(y, z, theta[:, 0], theta[:, 1], theta[:, 2], *t, A)

    def _theta(self, tp, X):
        return agru.forward_t(tp, X, self.head, self.cfg.use_attention)

    def _eval(self, arrays, tails, which: str = "val") -> float:
        X, y, z = (self.Xv, self.yv, self.zv) if which == "val" else (self.Xt, self.yt, self.zt)
        tp = {k: Tensor(a) for k, a in zip(agru.PARAM_NAMES, arrays)}
        return float(ad.mean(self._nll(self._theta(tp, X), Tensor(tails), y, z)).data)

    def _grad_net(self, arrays, tails):
        tp = {k: Tensor(a, requires_grad=True) for k, a in zip(agru.PARAM_NAMES, arrays)}
        with ad.Tape() as tape:
            loss = ad.mean(self._nll(self._theta(tp, self.Xt), Tensor(tails), self.yt, self.zt))
        return float(loss.data), tape.backward(loss, list(tp.values()))

    def _grad_tails(self, theta, tails):
        tt = Tensor(tails, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mean(self._nll(Tensor(theta), tt, self.yt, self.zt))
        return float(loss.data), tape.backward(loss, [tt])[0]

    # blocks -----------------------------------------------------------------
    def _opt(self, lr):
        c = self.cfg
        return ad.RMSPropState(lr, c.momentum, c.rho, c.eps)

    def _record(self, v, phase, outer, epoch, train_nll=float("nan")):
        self.trace.evals.append({"phase": phase, "outer": outer, "epoch": epoch,
                                 "val_nll": v, "train_nll": train_nll})

    def _net_block(self, outer, lr):
        """Early-stopped network block; leaves the best-validation weights in place."""
        c = self.cfg
        arrays, tails = self.params, self.tails
        state = self._opt(lr)
        block_best = (self._eval(arrays, tails), [a.copy() for a in arrays])
        self._record(block_best[0], "net", outer, 0)
        wait = 0
        for epoch in range(1, c.n_tv + 1):
            loss, grads = self._grad_net(arrays, tails)
            arrays, state = ad.rmsprop_step(arrays, grads, state)
            if epoch % c.eval_every == 0 or epoch == c.n_tv:
                v = self._eval(arrays, tails)
                self._record(v, "net", outer, epoch, loss)
                if v < block_best[0]:
                    block_best, wait = (v, [a.copy() for a in arrays]), 0
                else:
                    wait += 1
                    if wait >= c.patience:
                        break
        self.params = block_best[1]
        self.trace.block_best.append(block_best[0])

    def _tail_block(self, outer, lr):
        c = self.cfg
        tp = {k: Tensor(a) for k, a in zip(agru.PARAM_NAMES, self.params)}
        theta = self._theta(tp, self.Xt).data
        t = self.tails.copy()
        state = self._opt(lr)
        start = best_nll = None
        best_t = t.copy()
        for _ in range(c.n_fix):
            loss, g = self._grad_tails(theta, t)
            if start is None:
                start = best_nll = loss
            elif loss < best_nll:
                best_nll, best_t = loss, t.copy()
            (t,), state = ad.rmsprop_step([t], [g], state)
            t = np.clip(t, gf.TAIL_MIN, gf.TAIL_MAX)
            self.trace.tail_path.append(t.copy())
        if c.n_fix:
            final = float(ad.mean(self._nll(Tensor(theta), Tensor(t), self.yt, self.zt)).data)
            if final < best_nll:
                best_nll, best_t = final, t
            self.trace.fix_blocks.append((start, best_nll))
        self.tails = best_t
        self._record(self._eval(self.params, self.tails), "tail", outer, c.n_fix, best_nll)

    def run(self):
        c = self.cfg
        self.trace.initial_val = self._eval(self.params, self.tails)
        good = ([a.copy() for a in self.params], self.tails.copy())
        lr_tv, lr_fix = c.l_tv, c.l_fix
        failures = 0
        outer = 0
        while outer < c.n_outer:
            try:
                self._net_block(outer, lr_tv)
                if not c.naive:
                    self._tail_block(outer, lr_fix)
            except FloatingPointError as exc:
                failures += 1
                snap = good
                if failures > 1:
                    raise TrainingError(f"{self.kind} fit: second numerical failure ({exc})", snap) from exc
                log.warning("%s fit: numerical failure (%s); restoring snapshot, halving learning rates",
                            self.kind, exc)
                self.params, self.tails = [a.copy() for a in snap[0]], snap[1].copy()
                lr_tv, lr_fix = lr_tv / 2, lr_fix / 2
                self.trace.lr_halved = True
                continue
            good = ([a.copy() for a in self.params], self.tails.copy())
            outer += 1
        self.trace.accepted_val = self._eval(self.params, self.tails)
        return AgruParams.from_arrays(self.params), self.tails


def fit_market(train: SampleSet, val: SampleSet | None, cfg: TrainConfig, seed) -> TrainedMarketModel:
    """Fit the market network and tails; Z~_M covers train then val rows."""
    fit = _Fit("market", train, val, cfg, seed)
    params, tails = fit.run()
    model = TrainedMarketModel(params, gf.TailParams(*tails), fit.norm, np.empty(0), np.empty(0, int),
                               cfg.use_attention, cfg.A, fit.head, fit.trace)
    rows = train if val is None else _concat(train, val)
    model.z_fit = model.latent(rows)
    model.fit_anchors = rows.anchors
    return model


def fit_stock(train: SampleSet, val: SampleSet | None, z_train: np.ndarray, z_val: np.ndarray | None,
              cfg: TrainConfig, seed) -> TrainedStockModel:
    """Fit one stock given the realized latent market factors of its rows."""
    z_train = np.asarray(z_train, dtype=float)
    if z_train.shape != (len(train),):
        raise ValueError("latent market factors must align with training rows")
    if val is not None and len(val) and np.shape(z_val) != (len(val),):
        raise ValueError("latent market factors must align with validation rows")
    fit = _Fit("stock", train, val, cfg, seed, z_train, z_val)
    params, tails = fit.run()
    return TrainedStockModel(params, gf.TailParams(*tails[:2]), gf.TailParams(*tails[2:]), fit.norm,
                             cfg.use_attention, cfg.A, fit.head, fit.trace)


def _concat(a: SampleSet, b: SampleSet) -> SampleSet:
    return SampleSet(np.concatenate([a.X, b.X]), np.concatenate([a.y, b.y]),
                     np.concatenate([a.anchors, b.anchors]))


def split_fit_rows(samples: SampleSet, n_train: int) -> tuple[SampleSet, SampleSet]:
    return samples.take(slice(0, n_train)), samples.take(slice(n_train, len(samples)))


def _fit_stock_job(args):
    return fit_stock(*args)


def fit_stocks(jobs: Sequence[tuple], workers: int = 1) -> list[TrainedStockModel]:
    """Run independent ``fit_stock`` argument tuples, optionally in processes."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_fit_stock_job, jobs))
    return [_fit_stock_job(j) for j in jobs]


# -- ensembles --------------------------------------------------------------------

def average_thetas(thetas: Sequence[np.ndarray]) -> np.ndarray:
    if not thetas:
        raise ValueError("nothing to average")
    shapes = {np.shape(t) for t in thetas}
    if len(shapes) != 1:
        raise ValueError(f"mismatched forecast shapes {shapes}")
    return np.mean(np.stack(thetas), axis=0)


def _check_arch(models) -> None:
    first = models[0].params
    for m in models[1:]:
        if not first.same_architecture(m.params) or m.use_attention != models[0].use_attention:
            raise ValueError("ensemble members have mismatched architectures")


def ensemble_market(models: Sequence[TrainedMarketModel], X: np.ndarray):
    """Averaged (alpha_M, beta_M) for windows (S, 2, T) and averaged tails."""
    _check_arch(models)
    theta = average_thetas([m.predict(X) for m in models])
    tail = average_thetas([m.tail.as_array() for m in models])
    return theta, tail


def ensemble_stock(models: Sequence[TrainedStockModel], X: np.ndarray):
    _check_arch(models)
    theta = average_thetas([m.predict(X) for m in models])
    tail_m = average_thetas([m.tail_m.as_array() for m in models])
    tail_i = average_thetas([m.tail_i.as_array() for m in models])
    return theta, tail_m, tail_i


def ensemble_forecast(market_models: Sequence[TrainedMarketModel],
                      stock_models: Sequence[Sequence[TrainedStockModel]],
                      market_window: np.ndarray, stock_windows: Sequence[np.ndarray],
                      tickers: Sequence[str] = (), A: float = gf.A_DEFAULT) -> gf.ForecastedFactorModel:
    """Factor model at one date from B_r market fits and B_r fits per stock."""
    return ensemble_forecast_path(market_models, stock_models, np.asarray(market_window)[None],
                                  [np.asarray(w)[None] for w in stock_windows], tickers, A)[0]


def ensemble_forecast_path(market_models, stock_models, market_X: np.ndarray,
                           stock_X: Sequence[np.ndarray], tickers: Sequence[str] = (),
                           A: float = gf.A_DEFAULT) -> list[gf.ForecastedFactorModel]:
    """Factor models for a batch of dates; windows are (S, D_in, T) arrays."""
    if len(stock_models) != len(stock_X):
        raise ValueError("one window batch per stock is required")
    th_m, tail_m = ensemble_market(market_models, market_X)
    per_stock = [ensemble_stock(ms, X) for ms, X in zip(stock_models, stock_X)]
    out = []
    for s in range(th_m.shape[0]):
        out.append(gf.ForecastedFactorModel(
            market=gf.MarketTheta(float(th_m[s, 0]), float(th_m[s, 1])),
            tail_m=gf.TailParams(*tail_m),
            alpha=[p[0][s, 0] for p in per_stock], beta=[p[0][s, 1] for p in per_stock],
            gamma=[p[0][s, 2] for p in per_stock],
            tail_im=[p[1] for p in per_stock], tail_i=[p[2] for p in per_stock],
            A=A, tickers=tuple(tickers)))
    return out


# -- persistence ------------------------------------------------------------------

def save_models(directory, market_models: Sequence[TrainedMarketModel],
                stock_models: dict[str, Sequence[TrainedStockModel]], cfg: TrainConfig,
                seeds: Sequence[int], extra: dict | None = None) -> dict:
    """One snapshot per network plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": stable_hash(cfg.to_dict()),
        "seeds": list(seeds),
        "ablation": cfg.ablation,
        "fix_optim": not cfg.naive,
        "market": [],
        "stocks": {},
        **(extra or {}),
    }
    for b, m in enumerate(market_models):
        name = f"market_{b}.bin"
        ad.save_snapshot(d / name, m.params.as_dict())
        manifest["market"].append({"snapshot": name, "tail": [m.tail.u, m.tail.v],
                                   "norm": m.norm.to_dict(), "accepted_val_nll": m.trace.accepted_val})
    for ticker, models in stock_models.items():
        entries = []
        for b, m in enumerate(models):
            name = f"stock_{ticker}_{b}.bin"
            ad.save_snapshot(d / name, m.params.as_dict())
            entries.append({"snapshot": name, "tail_m": [m.tail_m.u, m.tail_m.v],
                            "tail_i": [m.tail_i.u, m.tail_i.v], "norm": m.norm.to_dict(),
                            "accepted_val_nll": m.trace.accepted_val})
        manifest["stocks"][ticker] = entries
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return manifest


def load_models(directory):
    """Inverse of :func:`save_models`: (config, market models, {ticker: models}, manifest)."""
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"model manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cfg = TrainConfig(**manifest["config"])
    market = [TrainedMarketModel(AgruParams.from_arrays(ad.load_snapshot(d / e["snapshot"])),
                                 gf.TailParams(*e["tail"]), Normalizer.from_dict(e["norm"]),
                                 np.empty(0), np.empty(0, int), cfg.use_attention, cfg.A,
                                 cfg.head("market"))
              for e in manifest["market"]]
    stocks = {t: [TrainedStockModel(AgruParams.from_arrays(ad.load_snapshot(d / e["snapshot"])),
                                    gf.TailParams(*e["tail_m"]), gf.TailParams(*e["tail_i"]),
                                    Normalizer.from_dict(e["norm"]), cfg.use_attention, cfg.A,
                                    cfg.head("stock"))
                  for e in entries]
              for t, entries in manifest["stocks"].items()}
    return cfg, market, stocks, manifest
