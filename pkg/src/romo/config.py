"""Nested run configuration: defaults, JSON files and dotted overrides.

Precedence is command line > config file > defaults. Every leaf in
:data:`DEFAULTS` is documented in :data:`HELP`; keys not present in the
defaults are rejected wherever they come from.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .aggregation import AggregationKind
from .model import DEFAULT_K, METHODS, TrainConfig
from .particle import Protocol1, Protocol2
from .retrieval import SimilarityKind


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {"n_total": 12000, "trim": 1000, "fractions": [0.7, 0.1, 0.2]},
    "retrieval": {"k": DEFAULT_K, "similarity": "rbf", "sigma": 1.0},
    "aggregation": {"gamma": 2.0, "lam": 0.1},
    "train": {
        "epochs": 200,
        "batch_size": 128,
        "net_lr": 1e-3,
        "tau": 0.01,
        "dual_lr": 0.01,
        "patience": 20,
        "hidden": [64, 64],
        "beta": 0.5,
    },
    "optimize": {
        "protocol": "p1",
        "eta": 0.05,
        "max_steps": 1000,
        "converge_tol": 1e-6,
        "T": 250,
        "Q": 10,
        "fix": "",
        "trajectory_stride": 10,
    },
    "init": {"bin_dim": 2, "n_bins": 50, "per_bin": 2, "bottom_k": 128},
    "bench": {
        "task": "hartmann",
        "methods": list(METHODS),
        "seeds": [0, 1, 2, 3, 4],
        "data": None,
        "oracle": None,
        "fix": "2",
    },
}

HELP: dict[str, str] = {
    "data.n_total": "designs sampled for the synthetic Hartmann dataset",
    "data.trim": "lowest and highest scoring designs dropped after sampling",
    "data.fractions": "train / valid / pool fractions of the dataset",
    "retrieval.k": "neighbours retrieved per query",
    "retrieval.similarity": "inner | rbf | cosine",
    "retrieval.sigma": "RBF bandwidth",
    "aggregation.gamma": "shifted-softmax scale (parametric methods)",
    "aggregation.lam": "ridge parameter (non-parametric methods)",
    "train.epochs": "maximum training epochs",
    "train.batch_size": "minibatch size",
    "train.net_lr": "Adam learning rate for all networks",
    "train.tau": "slack of the conservatism constraint (normalized score units)",
    "train.dual_lr": "step size of the multiplier update",
    "train.patience": "epochs without validation improvement before stopping",
    "train.hidden": "hidden layer widths of both networks",
    "train.beta": "ensemble weight of the surrogate network",
    "optimize.protocol": "p1 (ascend to convergence) | p2 (T steps, last Q kept)",
    "optimize.eta": "ascent step size in normalized design space",
    "optimize.max_steps": "step cap of protocol p1",
    "optimize.converge_tol": "p1 stops once every proposed move is below this",
    "optimize.T": "steps of protocol p2",
    "optimize.Q": "trailing positions kept per particle by p2",
    "optimize.fix": "dimensions held constant, e.g. '2' or '0,3-5'",
    "optimize.trajectory_stride": "record every n-th ascent step in the trajectory CSV",
    "init.bin_dim": "Hartmann: dimension binned to pick starting particles",
    "init.n_bins": "Hartmann: number of equal-width bins",
    "init.per_bin": "Hartmann: lowest-scoring designs taken per bin",
    "init.bottom_k": "CSV task: number of lowest-scoring designs used as particles",
    "bench.task": "hartmann | csv",
    "bench.methods": "methods to run",
    "bench.seeds": "seeds to run",
    "bench.data": "CSV dataset path for task=csv",
    "bench.oracle": "external oracle command for task=csv (omit for predicted scores)",
    "bench.fix": "Hartmann: dimensions held constant during ascent",
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def _check_keys(obj: dict, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    for section, body in obj.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: section {section!r} must be an object")
        for key in body:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")


def merge(base: dict, update: dict, where: str = "config") -> dict:
    _check_keys(update, where)
    out = copy.deepcopy(base)
    for section, body in update.items():
        out[section].update(copy.deepcopy(body))
    return out


def load_file(path: str | Path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    _check_keys(obj, str(path))
    return obj


def _coerce(raw: str, like: Any) -> Any:
    """Parse a command-line string into the type of the default value."""
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, list):
        items = [s for s in raw.replace(" ", "").split(",") if s]
        if like and isinstance(like[0], str):
            return items
        if like and isinstance(like[0], int) and not isinstance(like[0], bool):
            return [int(s) for s in items]
        return [float(s) for s in items]
    if like is None and raw.lower() in ("", "none", "null"):
        return None
    return raw


def parse_override(item: str) -> tuple[str, str, Any]:
    """``"section.key=value"`` -> ``(section, key, typed value)``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    dotted, raw = item.split("=", 1)
    section, _, key = dotted.strip().partition(".")
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {dotted!r}")
    try:
        return section, key, _coerce(raw.strip(), DEFAULTS[section][key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {dotted}: {exc}") from None


def resolve(path: str | Path | None = None, overrides: list[str] | dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        cfg = merge(cfg, load_file(path), str(path))
    if isinstance(overrides, dict):
        cfg = merge(cfg, overrides, "overrides")
    else:
        for item in overrides or []:
            section, key, value = parse_override(item)
            cfg[section][key] = value
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed config once so bad values fail before any work starts."""
    try:
        train_config(cfg, 0)
        similarity_kind(cfg)
        aggregation_kind(cfg)
        protocol(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["bench"]["seeds"]:
        raise ConfigError("bench.seeds must not be empty")
    for m in cfg["bench"]["methods"]:
        if m.lower() not in METHODS:
            raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    if cfg["bench"]["task"] not in ("hartmann", "csv"):
        raise ConfigError(f"bench.task must be hartmann or csv, got {cfg['bench']['task']!r}")


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(seed=int(seed), **{**cfg["train"], "hidden": tuple(cfg["train"]["hidden"])})


def similarity_kind(cfg: dict) -> SimilarityKind:
    r = cfg["retrieval"]
    return SimilarityKind(r["similarity"], float(r["sigma"]))


def aggregation_kind(cfg: dict) -> AggregationKind:
    a = cfg["aggregation"]
    return AggregationKind("nonparametric", float(a["gamma"]), float(a["lam"]))


def protocol(cfg: dict) -> Protocol1 | Protocol2:
    o = cfg["optimize"]
    if not float(o["eta"]) > 0:
        raise ValueError("optimize.eta must be positive")
    if o["protocol"] == "p1":
        return Protocol1(int(o["max_steps"]), float(o["converge_tol"]), float(o["eta"]))
    if o["protocol"] == "p2":
        return Protocol2(int(o["T"]), int(o["Q"]), float(o["eta"]))
    raise ValueError(f"optimize.protocol must be p1 or p2, got {o['protocol']!r}")
