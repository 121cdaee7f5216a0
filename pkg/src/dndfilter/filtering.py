"""The diffusion-driven filter recursion: predict, encode, fuse, update.

Filtering protocol per task (see simulators.Episode): the disk filter is
given the first two ground-truth states (frames 0 and 1) to seed its
velocity estimate and emits estimates for frames 2..T; the odometry filter
is given frame 0 and emits estimates for frames 1..T.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import autodiff as ad
from . import kernels
from .diffusion import Denoiser, NoiseSchedule, StateNormalizer, sample_batch
from .nets import Linear, Mlp
from .rng import Rng
from .simulators import DISK, ODOM, Episode

FEATURE_DIM = 64
COND_DIM = 64
WINDOW = 4
VEL_WINDOW = 5  # running-mean window for the disk velocity estimate


def start_frame(task: str) -> int:
    return 2 if task == DISK else 1


class DiskObservationEncoder:
    """Detection-slot preprocessing for the sensor MLP.

    Slots arrive in shuffled order; the encoder canonicalizes them per frame
    by distance to the valid-detection centroid (a permutation, so no
    information is lost) and maps coordinates onto roughly [-1, 1]^2.
    Invalid slots sort last and stay all-zero.
    """

    def __init__(self, arena: float, n_slots: int):
        self.arena = float(arena)
        self.n_slots = int(n_slots)

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_slots

    def encode(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float32)
        flat = obs.reshape(-1, self.n_slots, 3).astype(np.float64)
        xy, valid = flat[:, :, :2], flat[:, :, 2]
        n_valid = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
        centroid = (xy * valid[:, :, None]).sum(axis=1, keepdims=True) / n_valid[:, :, None]
        dist = ((xy - centroid) ** 2).sum(axis=2) + 1e12 * (1.0 - valid)
        order = np.argsort(dist, axis=1, kind="stable")
        ranked = np.take_along_axis(flat, order[:, :, None], axis=1)
        half = self.arena / 2.0
        out = np.empty_like(ranked, dtype=np.float32)
        out[:, :, :2] = (ranked[:, :, :2] - half) / half * ranked[:, :, 2:]
        out[:, :, 2] = ranked[:, :, 2]
        return out.reshape(obs.shape)


class OdomObservationEncoder:
    """Standardizes observation channels by training-set statistics."""

    def __init__(self, norm: StateNormalizer):
        self.norm = norm

    @property
    def obs_dim(self) -> int:
        return self.norm.mean.shape[0]

    def encode(self, obs: np.ndarray) -> np.ndarray:
        return self.norm.normalize(np.asarray(obs, dtype=np.float32))


def stack_windows(encoded: np.ndarray, n_window: int) -> np.ndarray:
    """Stack the last n_window observation rows per frame (oldest first),
    repeating the first observation before the sequence start."""
    if encoded.ndim != 2 or encoded.shape[0] == 0:
        raise ValueError("stack_windows: need a non-empty (T, obs_dim) array")
    t_steps = encoded.shape[0]
    idx = np.arange(t_steps)[:, None] + np.arange(-(n_window - 1), 1)[None, :]
    idx = np.clip(idx, 0, None)
    return encoded[idx].reshape(t_steps, n_window * encoded.shape[1])


class DiskProcessModel:
    """Constant-velocity transition x_hat_t = x_{t-1} + v_hat."""

    def predict(self, x_prev: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
        return x_prev + v_hat

    def predict_t(self, x_prev: ad.Tensor, v_hat: ad.Tensor) -> ad.Tensor:
        return ad.add(x_prev, v_hat)


class UnicycleProcessModel:
    """Unit-step unicycle integration carrying (v, w) forward."""

    def predict(self, x_prev: np.ndarray) -> np.ndarray:
        px, py, th, v, w = (x_prev[..., i] for i in range(5))
        out = np.stack([px + v * np.cos(th), py + v * np.sin(th),
                        ad.wrap_angle_np(th + w), v, w], axis=-1)
        return out.astype(x_prev.dtype)

    def predict_t(self, x_prev: ad.Tensor) -> ad.Tensor:
        px = ad.select_cols(x_prev, 0, 1)
        py = ad.select_cols(x_prev, 1, 2)
        th = ad.select_cols(x_prev, 2, 3)
        v = ad.select_cols(x_prev, 3, 4)
        w = ad.select_cols(x_prev, 4, 5)
        return ad.concat([
            ad.add(px, ad.mul(v, ad.cos(th))),
            ad.add(py, ad.mul(v, ad.sin(th))),
            ad.wrap_angle(ad.add(th, w)),
            v,
            w,
        ])


class VelocityTracker:
    """Running mean of the filter's own state deltas (disk velocity v_hat)."""

    def __init__(self, v_init: np.ndarray, window: int = VEL_WINDOW):
        self.deltas = deque([np.asarray(v_init, dtype=np.float32)], maxlen=window)

    def value(self) -> np.ndarray:
        return np.mean(self.deltas, axis=0).astype(np.float32)

    def push(self, delta: np.ndarray):
        self.deltas.append(np.asarray(delta, dtype=np.float32))


class BatchVelocityTracker:
    """Vectorized VelocityTracker over a batch of sequences."""

    def __init__(self, v_init: np.ndarray, window: int = VEL_WINDOW):
        batch, dim = v_init.shape
        self.ring = np.zeros((batch, window, dim), dtype=np.float32)
        self.ring[:, 0] = v_init
        self.count = 1
        self.pos = 1
        self.window = window

    def value(self) -> np.ndarray:
        return self.ring[:, : self.count].mean(axis=1).astype(np.float32)

    def push(self, delta: np.ndarray):
        self.ring[:, self.pos % self.window] = delta
        self.pos += 1
        self.count = min(self.count + 1, self.window)


class DnDFilter:
    """Process model + sensor encoder + fusion + conditional denoiser.

    A frozen instance is immutable during rollouts and safe to reuse across
    sequences, each with its own rng stream.
    """

    def __init__(self, task: str, obs_encoder, sensor: Mlp, fusion: Linear,
                 denoiser: Denoiser, schedule: NoiseSchedule,
                 state_norm: StateNormalizer, window: int = WINDOW,
                 pred_mode: str = "model", n_samples: int = 1):
        if task not in (DISK, ODOM):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.obs_encoder = obs_encoder
        self.sensor = sensor
        self.fusion = fusion
        self.denoiser = denoiser
        self.schedule = schedule
        self.state_norm = state_norm
        self.window = int(window)
        self.pred_mode = pred_mode
        self.n_samples = int(n_samples)
        self.state_dim = denoiser.state_dim
        self.process = DiskProcessModel() if task == DISK else UnicycleProcessModel()

    # -- parameters -------------------------------------------------------
    def params(self) -> list[ad.Tensor]:
        return self.sensor.params() + self.fusion.params() + self.denoiser.params()

    def named_params(self):
        return (self.sensor.named_params("sensor")
                + self.fusion.named_params("fusion")
                + self.denoiser.named_params("denoiser"))

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def restore(self, snap: list[np.ndarray]):
        for p, s in zip(self.params(), snap):
            p.data[...] = s

    # -- the four ops (batched over sequences) -----------------------------
    def predict(self, x_prev: np.ndarray, v_hat: np.ndarray | None = None) -> np.ndarray:
        if self.task == DISK:
            return self.process.predict(x_prev, v_hat)
        return self.process.predict(x_prev)

    def encode(self, windows: np.ndarray) -> np.ndarray:
        if windows.size == 0:
            raise ValueError("encode: empty observation window")
        return self.sensor.forward_np(windows)

    def fuse(self, features: np.ndarray, slot_norm: np.ndarray,
             validity: np.ndarray) -> np.ndarray:
        x = np.concatenate([features, slot_norm, validity], axis=1)
        return kernels.linear(np.ascontiguousarray(x, dtype=np.float32),
                              self.fusion.w.data, self.fusion.b.data)

    def condition(self, features: np.ndarray, xhat: np.ndarray | None) -> np.ndarray:
        """Build the condition from features and an optional prediction;
        None encodes the null token (zeroed slot, validity 0)."""
        n = features.shape[0]
        if xhat is None:
            slot = np.zeros((n, self.state_dim), dtype=np.float32)
            valid = np.zeros((n, 1), dtype=np.float32)
        else:
            slot = self.state_norm.normalize(xhat)
            valid = np.ones((n, 1), dtype=np.float32)
        return self.fuse(features, slot, valid)

    def fuse_t(self, features: ad.Tensor, slot_norm: ad.Tensor,
               validity: ad.Tensor) -> ad.Tensor:
        return self.fusion.forward_t(ad.concat([features, slot_norm, validity]))

    def update(self, cond: np.ndarray, rngs: list[Rng]) -> np.ndarray:
        """Sample the posterior state for each condition row and map back to
        raw units (theta re-wrapped for odometry)."""
        acc = sample_batch(cond, self.denoiser, self.schedule, rngs)
        if self.n_samples > 1:
            acc = acc.astype(np.float64)
            for _ in range(self.n_samples - 1):
                acc += sample_batch(cond, self.denoiser, self.schedule, rngs)
            acc = (acc / self.n_samples).astype(np.float32)
        state = self.state_norm.denormalize(acc)
        if self.task == ODOM:
            state[:, 2] = ad.wrap_angle_np(state[:, 2])
        return state

    # -- stepping ----------------------------------------------------------
    def step(self, x_prev: np.ndarray, window: np.ndarray, rng: Rng,
             v_hat: np.ndarray | None = None, pred_mode: str | None = None,
             x_truth: np.ndarray | None = None) -> np.ndarray:
        """One filter step: predict -> encode -> fuse -> update."""
        mode = pred_mode or self.pred_mode
        f = self.encode(window[None, :])
        if mode == "none":
            xhat = None
        elif mode == "truth":
            xhat = np.asarray(x_truth, dtype=np.float32)[None, :]
        else:
            xhat = self.predict(x_prev[None, :],
                                None if v_hat is None else v_hat[None, :])
        c = self.condition(f, xhat)
        return self.update(c, [rng])[0]

    def rollout(self, obs: np.ndarray, x_init: np.ndarray, rng: Rng,
                start_t: int | None = None, v_init: np.ndarray | None = None,
                gt_states: np.ndarray | None = None,
                pred_mode: str | None = None) -> np.ndarray:
        """Sequential reference rollout over one observation sequence.

        Strictly causal: the estimate for frame t reads obs rows < t only
        through the stacked window and nothing after t. Returns one estimate
        per frame in start_t..T.
        """
        mode = pred_mode or self.pred_mode
        t0 = start_frame(self.task) if start_t is None else start_t
        enc = self.obs_encoder.encode(obs)
        windows = stack_windows(enc, self.window)
        tracker = VelocityTracker(v_init) if self.task == DISK else None
        x_prev = np.asarray(x_init, dtype=np.float32)
        out = np.zeros((obs.shape[0] - t0 + 1, self.state_dim), dtype=np.float32)
        for i, t in enumerate(range(t0, obs.shape[0] + 1)):
            est = self.step(
                x_prev, windows[t - 1], rng,
                v_hat=tracker.value() if tracker is not None else None,
                pred_mode=mode,
                x_truth=None if gt_states is None else gt_states[t])
            if tracker is not None:
                tracker.push(est - x_prev)
            x_prev = est
            out[i] = est
        return out

    def rollout_batch(self, episodes: list[Episode], rng: Rng,
                      pred_mode: str | None = None) -> np.ndarray:
        """Lockstep rollout over episodes; row b uses the substream
        ("episode", b) and matches a sequential rollout with that stream."""
        mode = pred_mode or self.pred_mode
        t0 = start_frame(self.task)
        t_steps = episodes[0].seq_len
        batch = len(episodes)
        windows = np.stack([
            stack_windows(self.obs_encoder.encode(ep.obs), self.window)
            for ep in episodes
        ])  # (B, T, win_dim)
        rngs = [rng.substream("episode", b) for b in range(batch)]
        x_prev = np.stack([ep.states[t0 - 1] for ep in episodes]).astype(np.float32)
        tracker = None
        if self.task == DISK:
            v0 = np.stack([ep.states[1] - ep.states[0] for ep in episodes])
            tracker = BatchVelocityTracker(v0.astype(np.float32))
        out = np.zeros((batch, t_steps - t0 + 1, self.state_dim), dtype=np.float32)
        for i, t in enumerate(range(t0, t_steps + 1)):
            f = self.encode(windows[:, t - 1])
            if mode == "none":
                xhat = None
            elif mode == "truth":
                xhat = np.stack([ep.states[t] for ep in episodes]).astype(np.float32)
            else:
                xhat = self.predict(
                    x_prev, tracker.value() if tracker is not None else None)
            c = self.condition(f, xhat)
            est = self.update(c, rngs)
            if tracker is not None:
                tracker.push(est - x_prev)
            x_prev = est
            out[:, i] = est
        return out


def run_episode(filt: DnDFilter, episode: Episode, rng: Rng,
                pred_mode: str | None = None) -> np.ndarray:
    """Roll the filter over one episode using the task's start protocol."""
    t0 = start_frame(filt.task)
    kwargs = {}
    if filt.task == DISK:
        kwargs["v_init"] = episode.states[1] - episode.states[0]
    mode = pred_mode or filt.pred_mode
    if mode == "truth":
        kwargs["gt_states"] = episode.states
    return filt.rollout(episode.obs, episode.states[t0 - 1], rng,
                        start_t=t0, pred_mode=mode, **kwargs)
