"""Classical reference filters for both tasks.

Disk task: an oracle Kalman filter (true velocity, true association, true
noise, occlusion oracle), a mismatched KF (same structure but
nearest-detection association with gating and an inflated measurement
covariance), and a bootstrap particle filter weighted by per-particle
nearest-detection likelihood. Odometry task: an extended KF with the true
process-noise scales but a nominal Gaussian measurement model that ignores
burst frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import wrap_angle_np
from .errors import NumericError
from .rng import Rng
from .simulators import DiskWorldConfig, Episode, OdometryConfig


@dataclass
class KfBelief:
    mean: np.ndarray
    cov: np.ndarray


def _check_psd(mat: np.ndarray, what: str):
    if not np.allclose(mat, mat.T, atol=1e-9):
        raise NumericError(f"{what} must be symmetric")
    if np.linalg.eigvalsh(mat).min() < -1e-9:
        raise NumericError(f"{what} must be positive semidefinite")


def kf_predict(belief: KfBelief, f_mat: np.ndarray, q_mat: np.ndarray,
               offset: np.ndarray | None = None) -> KfBelief:
    """Propagate: mean <- F mean (+ offset), cov <- F cov F^T + Q."""
    _check_psd(q_mat, "process covariance Q")
    mean = f_mat @ belief.mean
    if offset is not None:
        mean = mean + offset
    cov = f_mat @ belief.cov @ f_mat.T + q_mat
    return KfBelief(mean, cov)


def kf_update(belief: KfBelief, z: np.ndarray, h_mat: np.ndarray,
              r_mat: np.ndarray) -> KfBelief:
    """Standard gain update with the Joseph-form covariance."""
    innovation = z - h_mat @ belief.mean
    s_mat = h_mat @ belief.cov @ h_mat.T + r_mat
    try:
        gain = np.linalg.solve(s_mat.T, (belief.cov @ h_mat.T).T).T
    except np.linalg.LinAlgError as err:
        raise NumericError(f"singular innovation covariance: {err}") from err
    if not np.all(np.isfinite(gain)):
        raise NumericError("non-finite Kalman gain")
    mean = belief.mean + gain @ innovation
    eye = np.eye(belief.cov.shape[0])
    ikh = eye - gain @ h_mat
    cov = ikh @ belief.cov @ ikh.T + gain @ r_mat @ gain.T
    return KfBelief(mean, cov)


def _detections(episode: Episode, t: int, n_slots: int):
    """Valid detections (m, 2) at frame t (1-indexed)."""
    row = episode.obs[t - 1].reshape(n_slots, 3)
    mask = row[:, 2] > 0.5
    return row[mask, :2].astype(np.float64), np.flatnonzero(mask)


class OracleDiskKf:
    """Minimum-MSE reference: true velocity, true association, true noise,
    and updates skipped exactly on occluded frames."""

    def __init__(self, cfg: DiskWorldConfig):
        self.q_mat = np.eye(2) * cfg.process_noise**2
        self.r_mat = np.eye(2) * cfg.meas_noise**2
        self.n_slots = cfg.n_slots

    def run(self, episode: Episode) -> np.ndarray:
        v = episode.constants.astype(np.float64)
        belief = KfBelief(episode.states[1].astype(np.float64), np.zeros((2, 2)))
        eye = np.eye(2)
        out = np.zeros((episode.seq_len - 1, 2), dtype=np.float32)
        for i, t in enumerate(range(2, episode.seq_len + 1)):
            belief = kf_predict(belief, eye, self.q_mat, offset=v)
            if not episode.occluded[t - 1]:
                slot = int(episode.target_slot[t - 1])
                z = episode.obs[t - 1, 3 * slot: 3 * slot + 2].astype(np.float64)
                belief = kf_update(belief, z, eye, self.r_mat)
            out[i] = belief.mean
        return out


class MismatchedDiskKf:
    """Oracle KF structure, but association picks the valid detection nearest
    the predicted mean (Mahalanobis gate) and R is inflated; no occlusion
    oracle, so clutter inside the gate gets absorbed."""

    def __init__(self, cfg: DiskWorldConfig, inflation: float = 2.0, gate: float = 3.0):
        self.q_mat = np.eye(2) * cfg.process_noise**2
        self.r_mat = np.eye(2) * (inflation * cfg.meas_noise) ** 2
        self.gate2 = gate**2
        self.n_slots = cfg.n_slots

    def run(self, episode: Episode) -> np.ndarray:
        v = episode.constants.astype(np.float64)
        belief = KfBelief(episode.states[1].astype(np.float64), np.zeros((2, 2)))
        eye = np.eye(2)
        out = np.zeros((episode.seq_len - 1, 2), dtype=np.float32)
        for i, t in enumerate(range(2, episode.seq_len + 1)):
            belief = kf_predict(belief, eye, self.q_mat, offset=v)
            dets, _ = _detections(episode, t, self.n_slots)
            if dets.shape[0]:
                s_mat = belief.cov + self.r_mat
                diff = dets - belief.mean
                d2 = np.einsum("ij,ij->i", diff @ np.linalg.inv(s_mat), diff)
                best = int(np.argmin(d2))
                if d2[best] <= self.gate2:
                    belief = kf_update(belief, dets[best], eye, self.r_mat)
            out[i] = belief.mean
        return out


def systematic_resample(weights: np.ndarray, rng: Rng) -> np.ndarray:
    n = weights.shape[0]
    positions = (np.arange(n) + float(rng.uniform(0.0, 1.0))) / n
    cumw = np.cumsum(weights)
    cumw[-1] = 1.0
    return np.searchsorted(cumw, positions)


def pf_step(particles: np.ndarray, weights: np.ndarray, detections: np.ndarray,
            occluded: bool, v: np.ndarray, process_noise: float,
            meas_noise: float, rng: Rng):
    """One bootstrap-PF step on the disk motion law.

    Propagates with the true transition noise, weights each particle by a
    Gaussian likelihood of its nearest valid detection (uniform weights on
    occluded frames), and resamples systematically when ESS < n/2.
    Returns (particles, weights, degenerate_reset).
    """
    n = particles.shape[0]
    if n < 2:
        raise ValueError("particle filter needs n >= 2")
    particles = particles + v + process_noise * rng.normal((n, 2), dtype=np.float64)
    reset = False
    if not occluded and detections.shape[0]:
        d2 = np.min(
            ((particles[:, None, :] - detections[None, :, :]) ** 2).sum(-1), axis=1)
        log_w = np.log(np.maximum(weights, 1e-300)) - d2 / (2.0 * meas_noise**2)
        log_w -= log_w.max()
        weights = np.exp(log_w)
        total = weights.sum()
        if not np.isfinite(total) or total <= 0.0:
            weights = np.full(n, 1.0 / n)
            reset = True
        else:
            weights = weights / total
    ess = 1.0 / float((weights**2).sum())
    if ess < n / 2.0:
        idx = systematic_resample(weights, rng)
        particles = particles[idx]
        weights = np.full(n, 1.0 / n)
    return particles, weights, reset


class DiskParticleFilter:
    """Bootstrap PF on the disk task; the posterior mean is the estimate."""

    def __init__(self, cfg: DiskWorldConfig, n_particles: int = 256):
        self.cfg = cfg
        self.n = int(n_particles)
        self.degenerate_frames = 0

    def run(self, episode: Episode, rng: Rng) -> np.ndarray:
        v = episode.constants.astype(np.float64)
        particles = np.tile(episode.states[1].astype(np.float64), (self.n, 1))
        weights = np.full(self.n, 1.0 / self.n)
        out = np.zeros((episode.seq_len - 1, 2), dtype=np.float32)
        for i, t in enumerate(range(2, episode.seq_len + 1)):
            dets, _ = _detections(episode, t, self.cfg.n_slots)
            particles, weights, reset = pf_step(
                particles, weights, dets, bool(episode.occluded[t - 1]), v,
                self.cfg.process_noise, self.cfg.meas_noise, rng)
            self.degenerate_frames += int(reset)
            out[i] = weights @ particles
        return out


class MismatchedOdomEkf:
    """EKF on the unicycle model: true process-noise scales, nominal Gaussian
    measurement noise (burst frames unmodeled), no speed mean-reversion."""

    def __init__(self, cfg: OdometryConfig):
        self.cfg = cfg
        self.h_mat = np.zeros((2, 5))
        self.h_mat[0, 3] = 1.0
        self.h_mat[1, 4] = 1.0
        self.r_mat = np.diag([cfg.obs_speed_noise**2, cfg.obs_turn_noise**2])

    def run(self, episode: Episode) -> np.ndarray:
        cfg = self.cfg
        mean = episode.states[0].astype(np.float64)
        cov = np.eye(5) * 1e-10
        out = np.zeros((episode.seq_len, 5), dtype=np.float32)
        for t in range(1, episode.seq_len + 1):
            px, py, th, v, w = mean
            mean = np.array([px + v * np.cos(th), py + v * np.sin(th),
                             wrap_angle_np(th + w), v, w])
            f_jac = np.array([
                [1, 0, -v * np.sin(th), np.cos(th), 0],
                [0, 1, v * np.cos(th), np.sin(th), 0],
                [0, 0, 1, 0, 1],
                [0, 0, 0, 1, 0],
                [0, 0, 0, 0, 1],
            ])
            g_mat = np.array([[np.cos(th), 0], [np.sin(th), 0], [0, 1], [1, 0], [0, 1]])
            q_mat = g_mat @ np.diag([cfg.speed_walk_std**2, cfg.turn_walk_std**2]) @ g_mat.T
            q_mat += np.eye(5) * 1e-12
            cov = f_jac @ cov @ f_jac.T + q_mat
            belief = kf_update(KfBelief(mean, cov),
                               episode.obs[t - 1, :2].astype(np.float64),
                               self.h_mat, self.r_mat)
            mean, cov = belief.mean, belief.cov
            mean[2] = wrap_angle_np(mean[2])
            out[t - 1] = mean
        return out
