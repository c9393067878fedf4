"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import benchmarks as bm
from . import data as dp
from . import genfactor as gf
from . import pipeline as pl
from . import trainer as tr
from .config import ConfigError, RunConfig, load_config
from .cvar import CvarProblem, solve
from .hashing import stable_hash

log = logging.getLogger("gfagru")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- helpers ----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, config_hash: str) -> None:
    """CSV with a leading ``# config_hash`` line; floats use repr for exact round trips."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def file_digest(path) -> str:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data file not found: {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()[:16]


class Context:
    """Loaded data, split and hash for one configured run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.digest = file_digest(cfg.prices)
        table = dp.read_prices(cfg.prices)
        self.md = pl.MarketData.from_table(table, cfg.market)
        T = cfg.train.T
        if cfg.split_row:
            at = cfg.split_row
        elif cfg.split_date:
            at = dp.split_row_for_date(self.md.dates, cfg.split_date)
        else:
            at = None
        self.split = dp.split(self.md.n_rows, cfg.train_fraction, cfg.train.val_fraction, at, T)
        self.hash = cfg.config_hash(self.digest)

    @property
    def anchors(self) -> np.ndarray:
        return self.split.rebalance_anchors()

    def dates(self, anchors) -> list[str]:
        return [str(self.md.dates[int(a)]) for a in anchors]

    def load_models(self):
        d = Path(self.cfg.model_dir)
        if not (d / "manifest.json").exists():
            raise FileNotFoundError(f"no trained models in {d}; run 'gfagru train' first")
        tcfg, market, stocks, manifest = tr.load_models(d)
        return tcfg, market, stocks, manifest

    def forecasts(self, anchors=None):
        tcfg, market, stocks, _ = self.load_models()
        anchors = self.anchors if anchors is None else anchors
        return pl.forecast_path(market, stocks, self.md, anchors, tcfg.T, tcfg.A)


def _config(args) -> RunConfig:
    return load_config(args.config, overrides=args.set or ())


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args) -> int:
    table = dp.read_prices(args.input, drop_incomplete=True)
    table.to_csv(args.output)
    print(f"wrote {table.n_rows} rows x {len(table.tickers)} tickers to {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    tails = None if args.tails is None else tuple(float(x) for x in args.tails.split(","))
    model = dp.synth_truth(args.stocks, args.seed, tails)
    table = dp.synth_generate(model, args.days, args.seed, market_ticker=args.market)
    truth = dp.write_synth(args.output, table, model, args.seed, args.market)
    print(f"wrote {table.n_rows} rows x {len(table.tickers)} tickers to {args.output} (truth: {truth})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ctx = Context(cfg)
    market, stocks, seeds = pl.train_ensemble(ctx.md, ctx.split, cfg.train, cfg.seed, cfg.workers)
    sp = ctx.split
    manifest = tr.save_models(cfg.model_dir, market, stocks, cfg.train, seeds, extra={
        "run_config_hash": ctx.hash, "data_digest": ctx.digest, "market_ticker": cfg.market,
        "split": {"n_rows": sp.n_rows, "split": sp.split, "val_start": sp.val_start}})
    print(f"trained {len(market)} market and {len(market) * len(stocks)} stock networks; "
          f"manifest hash {stable_hash(manifest)}")
    return EXIT_OK


def _anchor_for(ctx: Context, date: str | None) -> int:
    if not date:
        return int(ctx.anchors[0])
    row = dp.split_row_for_date(ctx.md.dates, date)
    if row >= ctx.md.n_rows:
        raise dp.DataError(f"date {date} is after the last price row")
    return row


def cmd_forecast(args) -> int:
    cfg = _config(args)
    ctx = Context(cfg)
    anchor = _anchor_for(ctx, args.date)
    model = ctx.forecasts([anchor])[0]
    out = {"config_hash": ctx.hash, "date": ctx.dates([anchor])[0], "anchor": anchor,
           "model": model.to_dict()}
    Path(args.output).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"forecast for {out['date']} written to {args.output}")
    return EXIT_OK


def _read_forecast(path) -> tuple[gf.ForecastedFactorModel, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"forecast file not found: {p}")
    d = json.loads(p.read_text(encoding="utf-8"))
    return gf.ForecastedFactorModel.from_dict(d["model"]), d.get("config_hash", "")


def cmd_simulate(args) -> int:
    model, h = _read_forecast(args.forecast)
    h = stable_hash({"forecast": h, "n": args.n, "seed": args.seed})
    scen = gf.simulate(model, args.n, args.seed)
    scen.to_csv(args.output, comment=f"config_hash: {h}")
    print(f"wrote {args.n} scenarios to {args.output}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    p = Path(args.scenarios)
    if not p.exists():
        raise FileNotFoundError(f"scenario file not found: {p}")
    scen = gf.ScenarioMatrix.from_csv(p)
    sol = solve(CvarProblem(scen, args.q, args.target))
    h = stable_hash({"scenarios": file_digest(p), "q": args.q, "target": args.target})
    if sol.status != "optimal":
        print(f"target {args.target} is infeasible for these scenarios", file=sys.stderr)
        return EXIT_NUMERIC
    rows = [[t, w] for t, w in zip(scen.tickers, sol.weights)]
    rows += [["objective_cvar", sol.objective], ["var", sol.var_threshold]]
    write_csv(args.output, ["name", "value"], rows, h)
    print(f"CVaR {sol.objective:.6g}; weights written to {args.output}")
    return EXIT_OK


def _strategy(name: str, ctx: Context, forecasts_cache: dict) -> bt.Strategy:
    if name == "EW":
        return bt.EqualWeight()
    if name == "SAA":
        return bt.StaticSAA()
    if name == "DCC-MM":
        return bt.DccMM()
    if "gf" not in forecasts_cache:
        forecasts_cache["gf"] = ctx.forecasts()
    return bt.GfAgru(forecasts_cache["gf"])


def _coverage_rows(ctx: Context, forecasts, q: float, n: int, seed: int):
    realized = pl.realized_monthly(ctx.md, ctx.anchors)
    series = bt.var_forecast_series(forecasts, q, n, seed, realized)
    rows = []
    for j, name in enumerate(series.columns):
        res = bt.coverage_tests(series.violations[:, j], 1.0 - q)
        rows.append([name, q, res.L, res.violations, res.p_pof, res.p_cci, res.p_cc])
    return rows


COVERAGE_HEADER = ["ticker", "q", "L", "violations", "p_pof", "p_cci", "p_cc"]


def cmd_backtest(args) -> int:
    cfg = _config(args)
    ctx = Context(cfg)
    data = bt.BacktestData(ctx.md.stocks, ctx.md.market, ctx.split, ctx.md.tickers, ctx.md.dates)
    targets = cfg.target_list()
    cache: dict = {}
    runs = []
    out = Path(cfg.out_dir)
    for name in cfg.strategy_list():
        log.info("backtest %s", name)
        strategy = _strategy(name, ctx, cache)
        runs += bt.run_backtest(strategy, data, targets, cfg.q, cfg.n, cfg.seed,
                                cfg.repetitions, cfg.workers, cfg.rr_numerator)
        if isinstance(strategy, bt.DccMM):
            manifest = {"run_config_hash": ctx.hash, "fit_end_row": ctx.split.split - 1,
                        **strategy.model.to_dict(ctx.md.tickers)}
            out.mkdir(parents=True, exist_ok=True)
            (out / "dcc_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                   encoding="utf-8")
    rows = bt.report_rows(runs)
    header = list(rows[0].keys())
    write_csv(out / "metrics.csv", header, [[r[k] for k in header] for r in rows], ctx.hash)

    dates = ctx.dates(data.anchors() + dp.HORIZON)
    labels = [f"{r.strategy}" + ("" if r.target is None else f"@{bt.target_label(r.target)}") for r in runs]
    wealth = np.column_stack([bt.wealth_curve(r.returns.mean(axis=0)) for r in runs])
    write_csv(out / "wealth.csv", ["date", *labels], [[d, *w] for d, w in zip(dates, wealth)], ctx.hash)

    wrows = []
    for r, label in zip(runs, labels):
        for k, d in enumerate(ctx.dates(data.anchors())):
            wrows.append([label, d, *r.weights.mean(axis=0)[k]])
    write_csv(out / "weights.csv", ["strategy", "date", *ctx.md.tickers], wrows, ctx.hash)

    if args.coverage:
        forecasts = cache.get("gf") or ctx.forecasts()
        write_csv(out / "coverage.csv", COVERAGE_HEADER,
                  _coverage_rows(ctx, forecasts, cfg.q, cfg.n, cfg.seed), ctx.hash)
    print(f"{len(rows)} metric rows written to {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    cfg = _config(args)
    ctx = Context(cfg)
    q = args.q if args.q is not None else cfg.q
    n = args.n if args.n is not None else cfg.n
    rows = _coverage_rows(ctx, ctx.forecasts(), q, n, cfg.seed)
    path = Path(cfg.out_dir) / "coverage.csv"
    write_csv(path, COVERAGE_HEADER, rows, ctx.hash)
    print(f"coverage tests for {len(rows)} series written to {path}")
    return EXIT_OK


def cmd_export_params(args) -> int:
    cfg = _config(args)
    ctx = Context(cfg)
    anchors = ctx.anchors
    fcs = ctx.forecasts(anchors)
    header = ["date", "anchor", "alpha_M", "beta_M", "u_M", "v_M"]
    for t in ctx.md.tickers:
        header += [f"{t}_{k}" for k in ("alpha", "beta", "gamma", "u_iM", "v_iM", "u_i", "v_i")]
    rows = []
    for d, a, m in zip(ctx.dates(anchors), anchors, fcs):
        row = [d, int(a), m.market.alpha, m.market.beta, m.tail_m.u, m.tail_m.v]
        for i in range(m.n_stocks):
            row += [m.alpha[i], m.beta[i], m.gamma[i], *m.tail_im[i], *m.tail_i[i]]
        rows.append(row)
    path = Path(args.output) if args.output else Path(cfg.out_dir) / "params.csv"
    write_csv(path, header, rows, ctx.hash)
    print(f"{len(rows)} dated parameter rows written to {path}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfagru", description="Generative factor model portfolio toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", "-c", help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a field, e.g. q=0.95 or train.n_outer=2")
        return sp

    s = sub.add_parser("ingest", help="clean a price CSV (drop incomplete tickers)")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate synthetic prices from a random ground-truth model")
    s.add_argument("--output", required=True)
    s.add_argument("--stocks", type=int, default=10)
    s.add_argument("--days", type=int, default=1008)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tails", help="fix every tail pair, e.g. 2.0,2.0")
    s.add_argument("--market", default="MARKET")
    s.set_defaults(func=cmd_synth)

    with_config(sub.add_parser("train", help="fit the ensemble and save it")).set_defaults(func=cmd_train)

    s = with_config(sub.add_parser("forecast", help="factor-model forecast at one date"))
    s.add_argument("--date", help="ISO date; defaults to the first rebalance date")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("simulate", help="draw scenarios from a saved forecast")
    s.add_argument("--forecast", required=True)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("optimize", help="minimum-CVaR weights for a scenario CSV")
    s.add_argument("--scenarios", required=True)
    s.add_argument("--q", type=float, default=0.90)
    s.add_argument("--target", type=float, required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_optimize)

    s = with_config(sub.add_parser("backtest", help="rolling monthly backtest of the configured strategies"))
    s.add_argument("--coverage", action="store_true", help="also write VaR coverage tests")
    s.set_defaults(func=cmd_backtest)

    s = with_config(sub.add_parser("coverage", help="VaR coverage tests of the trained model"))
    s.add_argument("--q", type=float)
    s.add_argument("--n", type=int)
    s.set_defaults(func=cmd_coverage)

    s = with_config(sub.add_parser("export-params", help="dated parameter forecasts as CSV"))
    s.add_argument("--output")
    s.set_defaults(func=cmd_export_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"gfagru: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dp.DataError, FileNotFoundError) as e:
        print(f"gfagru: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (tr.TrainingError, bm.FitError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as e:
        print(f"gfagru: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"gfagru: invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
