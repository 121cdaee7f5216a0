"""Seeded synthetic environments: disk tracking under clutter/occlusion and
unicycle odometry with burst-corrupted velocity readings.

Episode layout (both tasks): `states` holds T+1 ground-truth states for
frames 0..T; `obs`, `occluded` and `target_slot` cover frames 1..T. Frame 0
(and frame 1 for the disk task) provide the known initial states handed to
filters, which therefore estimate frames 2..T (disk) or 1..T (odometry).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import wrap_angle_np
from .rng import Rng

DISK = "disk"
ODOM = "odom"


@dataclass(frozen=True)
class DiskWorldConfig:
    arena: float = 128.0
    n_clutter: int = 100
    clutter_radius: tuple = (3.0, 9.0)
    target_radius: tuple = (3.0, 6.0)
    process_noise: float = 1.5
    meas_noise: float = 1.0
    n_slots: int = 8
    seq_len: int = 100
    target_speed: float = 0.5
    clutter_speed: float = 1.0
    init_margin: float = 32.0

    def __post_init__(self):
        if self.n_slots < 1 or self.seq_len < 2:
            raise ValueError("need n_slots >= 1 and seq_len >= 2")
        for name in ("arena", "process_noise", "meas_noise"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class OdometryConfig:
    seq_len: int = 100
    init_pos_range: float = 10.0
    init_heading_range: float = 1.8
    speed_mean: float = 1.0
    speed_init_std: float = 0.1
    speed_walk_std: float = 0.02
    speed_revert: float = 0.9  # AR(1) pull toward speed_mean keeps drift bounded
    min_speed: float = 0.05
    turn_init_std: float = 0.03
    turn_walk_std: float = 0.01
    turn_revert: float = 0.9
    obs_speed_noise: float = 0.05
    obs_turn_noise: float = 0.015
    n_distractors: int = 4
    burst_prob: float = 0.15
    burst_scale: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ValueError("burst_prob must lie in [0, 1]")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        for name in ("obs_speed_noise", "obs_turn_noise", "burst_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Episode:
    """One ground-truth trajectory with its observation stream."""

    task: str
    states: np.ndarray        # (T+1, D) float32, frames 0..T
    obs: np.ndarray           # (T, obs_dim) float32, frames 1..T
    occluded: np.ndarray      # (T,) uint8; disk: target hidden, odom: burst frame
    target_slot: np.ndarray   # (T,) int16; detection slot of the target, -1 if none
    constants: np.ndarray     # (C,) float32; disk: true velocity v

    @property
    def seq_len(self) -> int:
        return self.obs.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]


def disk_obs_dim(cfg: DiskWorldConfig) -> int:
    return 3 * cfg.n_slots


def odom_obs_dim(cfg: OdometryConfig) -> int:
    return 2 + cfg.n_distractors


def gen_disk_episode(cfg: DiskWorldConfig, seed: int) -> Episode:
    """Target and clutter disks all follow x_{t+1} = x_t + v + 1.5 w_t.

    Per frame the observation is up to `n_slots` detections: the target's
    noisy position iff its center is not covered by any clutter disk, the
    remaining slots filled with the clutter centers nearest the target,
    shuffled. Invalid slots are zeroed with validity 0.
    """
    t_steps = cfg.seq_len
    r = Rng(seed).substream("disk-episode")
    v = r.uniform(-cfg.target_speed, cfg.target_speed, (2,), dtype=np.float64)
    x0 = r.uniform(cfg.init_margin, cfg.arena - cfg.init_margin, (2,), dtype=np.float64)
    r.uniform(*cfg.target_radius)  # target size: scene parameter, not used downstream
    steps = v + cfg.process_noise * r.normal((t_steps, 2), dtype=np.float64)
    states = np.vstack([x0, x0 + np.cumsum(steps, axis=0)])

    n_c = cfg.n_clutter
    c_pos0 = r.uniform(0.0, cfg.arena, (n_c, 2), dtype=np.float64)
    c_vel = r.uniform(-cfg.clutter_speed, cfg.clutter_speed, (n_c, 2), dtype=np.float64)
    c_rad = r.uniform(cfg.clutter_radius[0], cfg.clutter_radius[1], (n_c,), dtype=np.float64)
    c_steps = c_vel + cfg.process_noise * r.normal((t_steps, n_c, 2), dtype=np.float64)
    c_pos = c_pos0 + np.cumsum(c_steps, axis=0)  # (T, n_c, 2), frames 1..T

    meas = cfg.meas_noise * r.normal((t_steps, 2), dtype=np.float64)

    m = cfg.n_slots
    obs = np.zeros((t_steps, 3 * m), dtype=np.float32)
    occluded = np.zeros(t_steps, dtype=np.uint8)
    target_slot = np.full(t_steps, -1, dtype=np.int16)
    for t in range(t_steps):
        tgt = states[t + 1]
        dets = []
        if n_c:
            d = np.linalg.norm(c_pos[t] - tgt, axis=1)
            hidden = bool(np.any(d <= c_rad))
            order = np.argsort(d, kind="stable")
        else:
            hidden = False
            order = np.empty(0, dtype=np.intp)
        if not hidden:
            dets.append(("target", tgt + meas[t]))
        for j in order[: m - len(dets)]:
            dets.append(("clutter", c_pos[t, j]))
        perm = r.permutation(m)
        occluded[t] = hidden
        for slot, src in zip(perm, dets):
            kind, xy = src
            obs[t, 3 * slot: 3 * slot + 2] = xy
            obs[t, 3 * slot + 2] = 1.0
            if kind == "target":
                target_slot[t] = slot
    return Episode(DISK, states.astype(np.float32), obs, occluded, target_slot,
                   np.asarray(v, dtype=np.float32))


def gen_odometry_episode(cfg: OdometryConfig, seed: int) -> Episode:
    """Unicycle ground truth with mean-reverting speed/turn-rate walks.

    The state is (px, py, theta, v, w) where (v, w) produced the step into
    the current frame. Observations are per-frame speed and turn readings
    plus distractor channels; on burst frames all channels are corrupted.
    """
    t_steps = cfg.seq_len
    r = Rng(seed).substream("odom-episode")
    p0 = r.uniform(-cfg.init_pos_range, cfg.init_pos_range, (2,), dtype=np.float64)
    th0 = float(r.uniform(-cfg.init_heading_range, cfg.init_heading_range))
    v0 = cfg.speed_mean + cfg.speed_init_std * float(r.normal())
    w0 = cfg.turn_init_std * float(r.normal())
    v_noise = r.normal((t_steps,), dtype=np.float64)
    w_noise = r.normal((t_steps,), dtype=np.float64)
    obs_noise = r.normal((t_steps, 2), dtype=np.float64)
    distract = r.normal((t_steps, cfg.n_distractors), dtype=np.float64)
    burst = r.bernoulli(cfg.burst_prob, (t_steps,))

    states = np.zeros((t_steps + 1, 5), dtype=np.float64)
    states[0] = (*p0, th0, max(v0, cfg.min_speed), w0)
    for t in range(1, t_steps + 1):
        px, py, th, v, w = states[t - 1]
        v_new = cfg.speed_mean + cfg.speed_revert * (v - cfg.speed_mean) \
            + cfg.speed_walk_std * v_noise[t - 1]
        v_new = max(v_new, cfg.min_speed)
        w_new = cfg.turn_revert * w + cfg.turn_walk_std * w_noise[t - 1]
        states[t] = (px + v_new * np.cos(th), py + v_new * np.sin(th),
                     wrap_angle_np(th + w_new), v_new, w_new)

    scale = np.where(burst, cfg.burst_scale, 1.0)
    obs = np.zeros((t_steps, 2 + cfg.n_distractors), dtype=np.float64)
    obs[:, 0] = states[1:, 3] + cfg.obs_speed_noise * scale * obs_noise[:, 0]
    obs[:, 1] = states[1:, 4] + cfg.obs_turn_noise * scale * obs_noise[:, 1]
    obs[:, 2:] = distract * np.where(burst, 3.0, 1.0)[:, None]
    return Episode(ODOM, states.astype(np.float32), obs.astype(np.float32),
                   burst.astype(np.uint8), np.full(t_steps, -1, dtype=np.int16),
                   np.zeros(0, dtype=np.float32))


def generate_episode(task: str, cfg, seed: int) -> Episode:
    if task == DISK:
        return gen_disk_episode(cfg, seed)
    if task == ODOM:
        return gen_odometry_episode(cfg, seed)
    raise ValueError(f"unknown task {task!r}")


def default_config(task: str):
    return DiskWorldConfig() if task == DISK else OdometryConfig()


def config_from_dict(task: str, overrides: dict):
    cls = DiskWorldConfig if task == DISK else OdometryConfig
    base = asdict(cls())
    unknown = set(overrides) - set(base)
    if unknown:
        raise ValueError(f"unknown {task} world config keys: {sorted(unknown)}")
    base.update(overrides)
    for key in ("clutter_radius", "target_radius"):
        if key in base:
            base[key] = tuple(base[key])
    return cls(**base)


def split_seeds(base_seed: int, split: str, count: int) -> list[int]:
    """Disjoint literal seed ranges per split (train from base, test offset)."""
    offset = {"train": 0, "test": 1 << 20}[split]
    if count >= (1 << 20):
        raise ValueError("split too large for disjoint seed ranges")
    return [int(base_seed) + offset + i for i in range(count)]


def generate_split(task: str, cfg, seeds: list[int]) -> list[Episode]:
    return [generate_episode(task, cfg, s) for s in seeds]
