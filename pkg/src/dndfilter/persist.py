"""Mapping between in-memory models and DNDC checkpoints."""

from __future__ import annotations

import numpy as np

from .dataio import build_id, read_checkpoint, write_checkpoint
from .diffusion import Denoiser, NoiseSchedule, StateNormalizer
from .errors import FormatError
from .filtering import (DiskObservationEncoder, DnDFilter, OdomObservationEncoder)
from .nets import Linear, Mlp
from .rng import Rng
from .simulators import DISK


def model_blocks(model: DnDFilter) -> list[tuple[str, np.ndarray]]:
    blocks = [(name, p.data) for name, p in model.named_params()]
    blocks.append(("state_norm.mean", model.state_norm.mean))
    blocks.append(("state_norm.scale", model.state_norm.scale))
    if model.task != DISK:
        blocks.append(("obs_norm.mean", model.obs_encoder.norm.mean))
        blocks.append(("obs_norm.scale", model.obs_encoder.norm.scale))
    blocks.append(("schedule.alpha", model.schedule.alpha))
    blocks.append(("schedule.alpha_bar", model.schedule.alpha_bar))
    blocks.append(("schedule.sigma", model.schedule.sigma))
    return blocks


def save_model(path, model: DnDFilter, config_hash: str, extra_meta: dict | None = None,
               overwrite: bool = True) -> None:
    obs_dim = (model.obs_encoder.obs_dim if model.task != DISK
               else model.obs_encoder.obs_dim)
    meta = {
        "task": model.task,
        "k_steps": model.schedule.k_steps,
        "config_hash": config_hash,
        "build": build_id(),
        "pred_mode": model.pred_mode,
        "window": model.window,
        "obs_dim": obs_dim,
        "state_dim": model.state_dim,
        "feature_dim": model.fusion.w.data.shape[1],
        "sensor_hidden": [l.w.data.shape[1] for l in model.sensor.layers[:-1]],
        "denoiser_hidden": list(model.denoiser.hidden),
        "emb_dim": model.denoiser.emb_dim,
    }
    if model.task == DISK:
        meta["arena"] = model.obs_encoder.arena
        meta["n_slots"] = model.obs_encoder.n_slots
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, model_blocks(model), meta, overwrite=overwrite)


def load_model(path) -> tuple[DnDFilter, dict]:
    blocks, meta = read_checkpoint(path)
    by_name = dict(blocks)
    if len(by_name) != len(blocks):
        raise FormatError("duplicate block names in checkpoint")
    task = meta["task"]
    state_dim = int(meta["state_dim"])
    obs_dim = int(meta["obs_dim"])
    rng = Rng(0)
    sensor = Mlp([int(meta["window"]) * obs_dim, *meta["sensor_hidden"],
                  int(meta["feature_dim"])], rng)
    cond_dim = int(meta["feature_dim"])
    fusion = Linear(cond_dim + state_dim + 1, cond_dim, rng)
    denoiser = Denoiser(state_dim, cond_dim, int(meta["k_steps"]), rng,
                        hidden=tuple(meta["denoiser_hidden"]),
                        emb_dim=int(meta["emb_dim"]))
    try:
        schedule = NoiseSchedule(by_name["schedule.alpha"], by_name["schedule.sigma"])
        if not np.array_equal(schedule.alpha_bar, by_name["schedule.alpha_bar"]):
            raise FormatError("stored alpha_bar does not match stored alpha")
        state_norm = StateNormalizer(by_name["state_norm.mean"],
                                     by_name["state_norm.scale"])
        if task == DISK:
            encoder = DiskObservationEncoder(meta["arena"], meta["n_slots"])
        else:
            encoder = OdomObservationEncoder(StateNormalizer(
                by_name["obs_norm.mean"], by_name["obs_norm.scale"]))
        model = DnDFilter(task, encoder, sensor, fusion, denoiser, schedule,
                          state_norm, window=int(meta["window"]),
                          pred_mode=meta.get("pred_mode", "model"))
        for name, p in model.named_params():
            src = by_name[name]
            if src.shape != p.data.shape:
                raise FormatError(f"block {name} has shape {src.shape}, "
                                  f"expected {p.data.shape}")
            p.data[...] = src
    except KeyError as err:
        raise FormatError(f"checkpoint is missing block {err}") from err
    except ValueError as err:
        raise FormatError(f"invalid checkpoint contents: {err}") from err
    return model, meta
