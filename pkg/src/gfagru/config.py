"""Run configuration: an INI file, then GFAGRU_* environment variables, then
command-line ``--set`` overrides, in increasing precedence.

Keys in the ``[train]`` section map onto :class:`TrainConfig`; keys in any
other section map onto :class:`RunConfig`.  Environment variables are
``GFAGRU_<KEY>`` and ``GFAGRU_TRAIN_<KEY>``; overrides are ``key=value`` or
``train.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .hashing import stable_hash
from .trainer import TrainConfig

ALLOWED_QN = {0.90: 5000, 0.95: 10000, 0.99: 50000}
STRATEGIES = ("EW", "SAA", "DCC-MM", "GF-AGRU")
ENV_PREFIX = "GFAGRU_"
# locations that do not change results and are left out of the hash
_PATH_FIELDS = ("prices", "model_dir", "out_dir")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    prices: str = "prices.csv"
    market: str = "MARKET"
    train_fraction: float = 0.6
    split_date: str = ""
    split_row: int = 0  # 0 means use split_date or train_fraction
    q: float = 0.90
    n: int = 5000
    allow_nonstandard: bool = False
    targets: str = "0.01,0.02,0.03,ew"
    repetitions: int = 10
    strategies: str = ",".join(STRATEGIES)
    rr_numerator: str = "body"
    seed: int = 0
    workers: int = 1
    model_dir: str = "models"
    out_dir: str = "reports"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.split_row < 0:
            raise ConfigError("split_row must be nonnegative")
        if not 0 < self.q < 1:
            raise ConfigError("q must lie in (0, 1)")
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if not self.allow_nonstandard:
            key = round(self.q, 10)
            if key not in ALLOWED_QN or ALLOWED_QN[key] != self.n:
                raise ConfigError(f"q/n pair ({self.q}, {self.n}) is not one of "
                                  f"{sorted(ALLOWED_QN.items())}; set allow_nonstandard to override")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.rr_numerator not in ("body", "upper"):
            raise ConfigError("rr_numerator must be 'body' or 'upper'")
        for s in self.strategy_list():
            if s not in STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {s!r}")
        self.target_list()

    def strategy_list(self) -> list[str]:
        return [s.strip() for s in self.strategies.split(",") if s.strip()]

    def target_list(self) -> list:
        out = []
        for tok in (t.strip() for t in self.targets.split(",")):
            if not tok:
                continue
            if tok.lower() == "ew":
                out.append("ew")
                continue
            try:
                out.append(float(tok))
            except ValueError:
                raise ConfigError(f"targets: cannot parse {tok!r}") from None
        if not out:
            raise ConfigError("targets must list at least one value")
        return out

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "train"}
        d["train"] = self.train.to_dict()
        return d

    def config_hash(self, data_digest: str = "") -> str:
        d = self.to_dict()
        for k in _PATH_FIELDS:
            d.pop(k)
        d["data_digest"] = data_digest
        return stable_hash(d)


def _convert(name: str, default, raw: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


_RUN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(RunConfig) if f.name != "train"}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def _apply(values: dict, train: dict, key: str, raw: str, section_train: bool) -> None:
    table, target, label = ((_TRAIN_DEFAULTS, train, f"train.{key}") if section_train
                            else (_RUN_DEFAULTS, values, key))
    if key not in table:
        raise ConfigError(f"unknown configuration field {label!r}")
    target[key] = _convert(label, table[key], raw)


def load_config(path: str | None = None, env: Mapping[str, str] | None = None,
                overrides: Sequence[str] = ()) -> RunConfig:
    values: dict = {}
    train: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str  # keep case, e.g. the window length T
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, train, key, raw, section == "train")
    env = os.environ if env is None else env
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        if key.startswith("TRAIN_"):
            key = key[len("TRAIN_"):]
            key = key if key in _TRAIN_DEFAULTS else key.lower()
            _apply(values, train, key, env[name], True)
        elif key.lower() in _RUN_DEFAULTS:
            _apply(values, train, key.lower(), env[name], False)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key.startswith("train."):
            _apply(values, train, key[len("train."):], raw, True)
        else:
            _apply(values, train, key, raw, False)
    try:
        tcfg = TrainConfig(**train)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    return RunConfig(**values, train=tcfg)


def write_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    run = {k: v for k, v in cfg.to_dict().items() if k != "train"}
    parser["run"] = {k: str(v) for k, v in run.items()}
    parser["train"] = {k: str(v) for k, v in cfg.train.to_dict().items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
