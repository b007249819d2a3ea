"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from typing import Any, Dict

from .phantom import DEFAULT_READER_BIASES, PhantomConfig


class ConfigError(ValueError):
    pass


_PHANTOM_FIELDS = {f.name: f.default for f in fields(PhantomConfig) if f.name != "seed"}

DEFAULTS: Dict[str, Any] = {
    "output_dir": "run",
    "seeds": {"global": 0, "phantom": None, "curate": None, "detect": None, "classify": None, "readers": None},
    "phantom": {"n_patients": 100, "visits": 2, "grade_distribution": None, **_PHANTOM_FIELDS},
    "curate": {"fractions": [0.728, 0.092, 0.180]},
    "detect": {
        "n_train": 210, "n_val": 45, "n_test": 45,
        "grid": 16, "input_size": 512, "stem_pool": 4, "widths": [8, 16, 32], "extra": [32, 32],
        "batch_size": 4, "lr": 1e-4, "patience": 20, "max_epochs": 200, "offset_weight": 1.0,
        "shared": False,
    },
    "classify": {
        "variants": ["LAT", "PA", "PA+LAT"],
        "centers": "detector",
        "input_size": 256, "widths": [16, 32, 64], "trunk_width": 128, "trunk_blocks": 2, "hidden": 128,
        "lr": 1e-5, "batch_size": 16, "patience": 20, "warmup_epochs": 10, "max_epochs": 300,
        "restarts": 10, "batches_per_epoch": None,
        "augment": {"flip_prob": 0.5, "rotation_deg": 10.0, "translation": 0.05, "scale": [0.9, 1.1],
                    "shear_deg": 5.0},
    },
    "eval": {
        "centers": "detector",
        "reader_cases": 204,
        "reader_swap_probabilities": [0.25, 0.12, 0.12, 0.12],
        "reader_biases": list(DEFAULT_READER_BIASES),
    },
}

VARIANTS = ("LAT", "PA", "PA+LAT")
CENTER_MODES = ("detector", "ground_truth")


def _merge(defaults: dict, given: dict, path: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        where = f" in section {path!r}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + '.' if path else ''}{k} must be an object")
            out[k] = _merge(defaults[k], v, f"{path}.{k}" if path else k)
        else:
            out[k] = v
    return out


def resolve(raw: dict) -> dict:
    """Defaults overlaid with ``raw``; unknown keys anywhere are an error."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw, "")
    bad = [v for v in cfg["classify"]["variants"] if v not in VARIANTS]
    if bad or not cfg["classify"]["variants"]:
        raise ConfigError(f"classify.variants must be a non-empty subset of {list(VARIANTS)}, got {bad or '[]'}")
    for section in ("classify", "eval"):
        if cfg[section]["centers"] not in CENTER_MODES:
            raise ConfigError(f"{section}.centers must be one of {list(CENTER_MODES)}")
    try:
        phantom_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom: {exc}") from None
    return cfg


def load(path) -> tuple:
    """(raw text, resolved config) for the JSON file at ``path``."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return text, resolve(raw)


def seed_for(cfg: dict, stage: str) -> int:
    s = cfg["seeds"].get(stage)
    return int(cfg["seeds"]["global"] if s is None else s)


def phantom_config(cfg: dict) -> PhantomConfig:
    p = {k: v for k, v in cfg["phantom"].items() if k in _PHANTOM_FIELDS}
    return PhantomConfig(seed=seed_for(cfg, "phantom"), **p)
