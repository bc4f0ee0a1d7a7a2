"""Run configuration: one JSON document covering data, model, train, eval.

Every key has a default; unknown keys are rejected with their dotted path
so typos fail loudly instead of silently training the wrong variant. The
resolved document is what a run directory stores.
"""

from __future__ import annotations

import copy
import json

from .errors import ConfigError
from .models import ModelConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "data": {
        "dir": "data",
    },
    "model": {
        "arch": "smagnet",
        "preset": "tiny",
        "fusion_mode": "complementary",
        "spatial_mask": True,
        "shared_decoder": True,
        "decoder_conv_kernel": 1,
    },
    "train": {
        "lr": 5e-4,
        "weight_decay": 0.0,
        "batch_size": None,  # null -> preset default (8 tiny / 16 paper)
        "epochs": None,  # null -> preset default (60 tiny / 200 paper)
        "loss_weight": 0.5,
        "crop": None,
        "flip_horizontal": True,
        "flip_vertical": True,
        "seed": 0,
    },
    "eval": {
        "batch_size": 16,
        "sweep_ratios": [0, 25, 50, 75, 100],
        "sweep_seeds": [0, 1, 2],
        "sweep_pattern": "band",
    },
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = {}
    for key, base in defaults.items():
        if key in given:
            val = given[key]
            if isinstance(base, dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"{path}{key}: expected an object")
                out[key] = _merge(base, val, f"{path}{key}.")
            else:
                out[key] = val
        else:
            out[key] = copy.deepcopy(base)
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key {path}{sorted(unknown)[0]}")
    return out


def resolve_config(given: dict | None) -> dict:
    """Defaults overlaid with the given document; unknown keys rejected."""
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULTS, given, "")


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config(None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e.msg} at line {e.lineno})") from e
    return resolve_config(doc)


def model_config(cfg: dict) -> ModelConfig:
    mc = ModelConfig(**cfg["model"])
    mc.validate()
    return mc


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    opt_int = lambda v: None if v is None else int(v)
    tc = TrainConfig(
        lr=float(t["lr"]),
        weight_decay=float(t["weight_decay"]),
        batch_size=opt_int(t["batch_size"]),
        epochs=opt_int(t["epochs"]),
        loss_weight=float(t["loss_weight"]),
        crop=opt_int(t["crop"]),
        flip_horizontal=bool(t["flip_horizontal"]),
        flip_vertical=bool(t["flip_vertical"]),
        seed=int(t["seed"]),
    )
    return tc.resolve(cfg["model"]["preset"])


def resolved_to_json(cfg: dict, train_cfg: TrainConfig) -> dict:
    """The document a run directory stores: fully concrete, no nulls left."""
    out = copy.deepcopy(cfg)
    out["train"]["batch_size"] = train_cfg.batch_size
    out["train"]["epochs"] = train_cfg.epochs
    return out
