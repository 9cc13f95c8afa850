"""Pipeline configuration: one JSON document with a ``version`` field.

Defaults follow the reference hyperparameters (d=128, two 1024-unit hidden
layers, Adam lr 1e-3, batch 2048, 3 epochs, budget 0.1). Command-line flags
and ``--set key=value`` pairs override individual keys.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .errors import ConfigError

CONFIG_VERSION = 1

# stage seed = global seed + offset, so any stage can be re-run on its own
SEED_OFFSETS = {
    "split": 0,
    "init": 1,
    "pretrain": 2,
    "saliency": 3,
    "slim_init": 4,
    "retrain": 5,
    "synth": 6,
}

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "out": "run",
    "dataset": {
        "format": "criteo",           # criteo | avazu | synthetic
        "paths": [],
        "min_freq": 10,
        "ratios": [8, 1, 1],
        "log_base": "e",
        "lenient": False,
        "synthetic": {
            "field_sizes": [30, 30, 30, 30, 30, 30],
            "n_records": 20000,
            "latent_dim": 8,
            "profile": "sparse",
            "strength": 1.0,
            "frac": 0.3,
            "exponent": 1.5,
            "bias": 0.0,
            "linear_scale": 0.5,
            "token_skew": 0.0,
        },
    },
    "model": {
        "architecture": "DeepFM",
        "d": 128,
        "hidden": [1024, 1024],
        "fusion": "sum",
        "dtype": "float32",
    },
    "optimizer": {"lr": 0.001, "batch_size": 2048, "epochs": 3},
    "pruning": {
        "kappa": 0.1,
        "mode": "weighted",
        "saliency_batch_size": 2048,
        "saliency_batches": 1,
    },
    "retrain": {
        "init_mode": "winning_ticket",
        "epochs": 3,
        "transform_init": "random",
        "linear_init": "restore",
        "mlp_init": "restore",
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as JSON when possible, else as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def apply_override(cfg: dict, keys: list[str], value: Any) -> None:
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
    node[keys[-1]] = value


def validate(cfg: dict) -> dict:
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.get('version')!r}")
    ds, mdl, opt, pr, rt = cfg["dataset"], cfg["model"], cfg["optimizer"], cfg["pruning"], cfg["retrain"]
    if ds["format"] not in ("criteo", "avazu", "synthetic"):
        raise ConfigError(f"unknown dataset format {ds['format']!r}")
    if ds["format"] != "synthetic" and not ds["paths"]:
        raise ConfigError("dataset.paths is empty")
    if ds["log_base"] not in ("e", "2", "10"):
        raise ConfigError("dataset.log_base must be one of e, 2, 10")
    if not isinstance(ds["min_freq"], int) or ds["min_freq"] < 1:
        raise ConfigError("dataset.min_freq must be a positive integer")
    if mdl["architecture"] not in ("FM", "WideDeep", "DeepFM"):
        raise ConfigError(f"unknown architecture {mdl['architecture']!r}")
    if not isinstance(mdl["d"], int) or mdl["d"] < 1:
        raise ConfigError("model.d must be a positive integer")
    if not (0 < float(pr["kappa"]) <= 1):
        raise ConfigError("pruning.kappa must lie in (0, 1]")
    if pr["mode"] not in ("weighted", "quantile"):
        raise ConfigError(f"unknown pruning.mode {pr['mode']!r}")
    for key in ("saliency_batch_size", "saliency_batches"):
        if not isinstance(pr[key], int) or pr[key] < 1:
            raise ConfigError(f"pruning.{key} must be a positive integer")
    if not isinstance(opt["batch_size"], int) or opt["batch_size"] < 1:
        raise ConfigError("optimizer.batch_size must be a positive integer")
    if float(opt["lr"]) <= 0:
        raise ConfigError("optimizer.lr must be positive")
    if not isinstance(opt["epochs"], int) or opt["epochs"] < 1:
        raise ConfigError("optimizer.epochs must be >= 1")
    if not isinstance(rt["epochs"], int) or rt["epochs"] < 0:
        raise ConfigError("retrain.epochs must be >= 0")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
        cfg = _merge(cfg, doc)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    return validate(cfg)


def stage_seed(cfg: dict, stage: str) -> int:
    return int(cfg["seed"]) + SEED_OFFSETS[stage]
