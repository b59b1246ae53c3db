"""Pipeline configuration: YAML file plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

DEFAULTS: dict[str, Any] = {
    "data": {"num_classes": 10, "n_train": 8000, "n_eval": 1000, "shape": [1, 8, 8], "noise": 1.5},
    "model": {
        "layers": [
            {"kind": "conv2d", "out": 8, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "conv2d", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
            {"kind": "conv2d", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
            {"kind": "dense", "out": 32},
            {"kind": "dense", "out": 10},
        ]
    },
    "train": {"steps": 3000, "lr": 0.05, "batch_size": 100},
    "controller": {
        "lam": 0.05,
        "mc_samples": 4,
        "iterations": 1000,
        "batch_size": 5,
        "lr": 0.01,
        "hidden": 32,
        "cell": "lstm",
        "fixed_bits": 3,
        "eval_samples": 1000,
        "baseline": False,
    },
    "quantizer": {
        "num_distance_clusters": 12,
        "retrain_steps": 500,
        "lr": 0.01,
        "batch_size": 100,
        "low_bit_threshold": 3,
        "recompute_distance_clusters": True,
    },
    "paths": {
        "workdir": "runs/default",
        "checkpoint": "float.ckpt",
        "train_report": "train_report.json",
        "sequence": "sequence.json",
        "search_log": "search_log.csv",
        "quantized_checkpoint": "quantized.ckpt",
        "packed": "model.dnqp",
        "metrics": "quantize_metrics.csv",
        "quantize_report": "quantize_report.json",
        "manifest": "manifest.json",
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> dict:
    user: dict = {}
    if path is not None:
        text = Path(path).read_text()
        user = yaml.safe_load(text) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        apply_override(cfg, item)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg.get("seed") is None:
        raise ConfigError("config must set an integer 'seed' (no entropy-based default)")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("'seed' must be an integer")
    if not cfg["model"]["layers"]:
        raise ConfigError("model.layers is empty")
    if cfg["model"]["layers"][-1].get("out") != cfg["data"]["num_classes"]:
        raise ConfigError("last layer width must equal data.num_classes")
    c = cfg["controller"]
    if c["mc_samples"] < 1:
        raise ConfigError("controller.mc_samples must be >= 1")
    if c["lam"] < 0:
        raise ConfigError("controller.lam must be >= 0")


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def path_of(cfg: dict, name: str) -> Path:
    p = Path(cfg["paths"][name])
    return p if p.is_absolute() else Path(cfg["paths"]["workdir"]) / p
