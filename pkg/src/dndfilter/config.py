"""Run configuration: documented defaults, strict validation, stable hashing.

Configs are JSON objects; unknown keys are rejected at every level. The
resolved (fully defaulted) config is echoed into every output file together
with its hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import UsageError
from .simulators import DISK, ODOM, config_from_dict
from .training import StageSpec, TrainConfig

# Every leaf has a default; see README for the field-by-field description.
DEFAULTS = {
    "task": DISK,                      # disk | odom
    "seed": 0,                         # training seed
    "out": "runs/out",                 # output directory
    "dataset": {
        "train": "",                   # path to train .dndf
        "test": "",                    # path to test .dndf
    },
    "world": {},                       # task-specific simulator overrides
    "data": {
        "n_train": 100,                # episodes in the train split
        "n_test": 20,                  # episodes in the test split
        "base_seed": 1234,             # split seeds derive from this
    },
    "model": {
        "window": 4,                   # observation history length
        "feature_dim": 64,             # sensor feature size
        "cond_dim": 64,                # fused condition size
        "sensor_hidden": [128],
        "denoiser_hidden": [128, 128],
        "emb_dim": 32,                 # timestep embedding size
    },
    "diffusion": {
        "k_steps": 10,
        "schedule": "linear-few-step",
    },
    "training": {
        "pred_mode": "model",          # model | none (observation-only variant)
        "val_fraction": 0.1,
        "patience": 5,
        "grad_clip": 1.0,
        "stages": [
            {"id": 1, "epochs": 30, "batch_size": 128, "lr": 1e-3},
            {"id": 2, "epochs": 30, "batch_size": 128, "lr": 5e-4},
        ],
    },
    "eval": {
        "seed": 1000,                  # rollout noise seed
        "n_samples": 1,                # diffusion samples per estimate
        "pf_particles": 256,
    },
}

_STAGE_KEYS = {"id", "epochs", "batch_size", "lr", "trunc_window"}
_STAGE3_DEFAULTS = {"epochs": 10, "batch_size": 16, "lr": 1e-4, "trunc_window": 10}


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise UsageError(f"config section {path or '<root>'} must be an object")
    unknown = set(user) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys at {path or '<root>'}: {sorted(unknown)}")
    out = {}
    for key, dval in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(dval)
        elif isinstance(dval, dict) and key != "world":
            out[key] = _merge(dval, user[key], f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(user[key])
    return out


def resolve_config(user: dict | None) -> dict:
    cfg = _merge(DEFAULTS, user or {})
    if cfg["task"] not in (DISK, ODOM):
        raise UsageError(f"task must be '{DISK}' or '{ODOM}', got {cfg['task']!r}")
    for stage in cfg["training"]["stages"]:
        unknown = set(stage) - _STAGE_KEYS
        if unknown:
            raise UsageError(f"unknown stage keys: {sorted(unknown)}")
        if "id" not in stage:
            raise UsageError("each stage needs an 'id'")
    try:
        config_from_dict(cfg["task"], cfg["world"])
    except ValueError as err:
        raise UsageError(str(err)) from err
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    try:
        return json.loads(text)
    except ValueError as err:
        raise UsageError(f"config {path} is not valid JSON: {err}") from err


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def world_config(resolved: dict):
    return config_from_dict(resolved["task"], resolved["world"])


def train_config(resolved: dict) -> TrainConfig:
    stages = []
    for s in resolved["training"]["stages"]:
        base = dict(_STAGE3_DEFAULTS) if s["id"] == 3 else {
            "epochs": 30, "batch_size": 128, "lr": 1e-3, "trunc_window": 10}
        base.update(s)
        stages.append(StageSpec(base["id"], base["epochs"], base["batch_size"],
                                base["lr"], base["trunc_window"]))
    m = resolved["model"]
    try:
        return TrainConfig(
            task=resolved["task"],
            k_steps=resolved["diffusion"]["k_steps"],
            seed=resolved["seed"],
            stages=stages,
            pred_mode=resolved["training"]["pred_mode"],
            val_fraction=resolved["training"]["val_fraction"],
            patience=resolved["training"]["patience"],
            grad_clip=resolved["training"]["grad_clip"],
            window=m["window"],
            feature_dim=m["feature_dim"],
            cond_dim=m["cond_dim"],
            sensor_hidden=tuple(m["sensor_hidden"]),
            denoiser_hidden=tuple(m["denoiser_hidden"]),
            emb_dim=m["emb_dim"],
            schedule_kind=resolved["diffusion"]["schedule"],
        )
    except ValueError as err:
        raise UsageError(str(err)) from err
