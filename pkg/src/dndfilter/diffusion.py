"""Conditional denoising diffusion on low-dimensional state vectors.

The reverse update at step k is

    x_{k-1} = rescale_k * (x_k + eps_coef_k * eps_hat) + sigma_k * z

with rescale_k = 1/sqrt(alpha_k) and eps_coef_k = -(1 - alpha_k) /
sqrt(1 - alpha_bar_k); sampling runs k = K..1 from a standard-normal draw,
with sigma_1 = 0 so the last step is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .nets import Mlp
from .rng import Rng

# Signal fraction left at the terminal step: alpha_bar_K is calibrated to
# this value so a K-step chain starts from (near) pure noise.
TERMINAL_ALPHA_BAR = 0.045
MAX_STEPS = 1000


class NoiseSchedule:
    """Per-step diffusion constants for k = 1..K (array index k-1)."""

    def __init__(self, alpha: np.ndarray, sigma: np.ndarray | None = None):
        alpha = np.asarray(alpha, dtype=np.float32)
        if alpha.ndim != 1 or alpha.size < 2:
            raise ValueError("schedule needs at least 2 steps")
        self.k_steps = int(alpha.size)
        self.alpha = alpha
        self.alpha_bar = np.cumprod(alpha.astype(np.float64)).astype(np.float32)
        if sigma is None:
            sigma = np.sqrt(1.0 - alpha)
            sigma[0] = 0.0
        self.sigma = np.asarray(sigma, dtype=np.float32)
        self._derive()
        self._validate()

    def _derive(self):
        a64 = self.alpha.astype(np.float64)
        ab64 = self.alpha_bar.astype(np.float64)
        self.rescale = (1.0 / np.sqrt(a64)).astype(np.float32)
        self.eps_coef = (-(1.0 - a64) / np.sqrt(1.0 - ab64)).astype(np.float32)
        self.sqrt_alpha_bar = np.sqrt(ab64).astype(np.float32)
        self.sqrt_one_minus_alpha_bar = np.sqrt(1.0 - ab64).astype(np.float32)

    def _validate(self):
        if not (np.all(self.alpha > 0.0) and np.all(self.alpha < 1.0)):
            raise ValueError("schedule requires 0 < alpha_k < 1")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] > 0.05:
            raise ValueError(
                f"terminal alpha_bar {self.alpha_bar[-1]:.4f} leaves too much signal"
            )
        if self.sigma[0] != 0.0:
            raise ValueError("sigma_1 must be 0 (deterministic final step)")


def make_schedule(k_steps: int, kind: str = "linear-few-step") -> NoiseSchedule:
    """Build a schedule whose per-step noise rates rise linearly with k,
    scaled so alpha_bar_K hits TERMINAL_ALPHA_BAR for any K in [2, 1000]."""
    if not isinstance(k_steps, (int, np.integer)) or k_steps < 2:
        raise ValueError(f"k_steps must be an int >= 2, got {k_steps!r}")
    if k_steps > MAX_STEPS:
        raise ValueError(f"k_steps must be <= {MAX_STEPS}, got {k_steps}")
    if kind != "linear-few-step":
        raise ValueError(f"unknown schedule kind: {kind!r}")
    ramp = np.linspace(0.1, 1.0, k_steps)

    def terminal(c):
        return float(np.prod(1.0 - c * ramp))

    lo, hi = 0.0, 1.0 - 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if terminal(mid) > TERMINAL_ALPHA_BAR:
            lo = mid
        else:
            hi = mid
    alpha = 1.0 - 0.5 * (lo + hi) * ramp
    return NoiseSchedule(alpha)


def _check_k(k, k_steps):
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > k_steps):
        raise ValueError(f"step k must lie in [1, {k_steps}], got {k}")
    return k


def forward_noise(x0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: x0 {x0.shape} and eps {eps.shape} differ")
    j = _check_k(k, sched.k_steps) - 1
    a = sched.sqrt_alpha_bar[j].astype(x0.dtype)
    b = sched.sqrt_one_minus_alpha_bar[j].astype(x0.dtype)
    if x0.ndim == 2 and np.ndim(j) == 1:
        a = a[:, None]
        b = b[:, None]
    return a * x0 + b * eps


def reverse_step(xk: np.ndarray, k: int, cond, denoiser, sched: NoiseSchedule,
                 z: np.ndarray) -> np.ndarray:
    """One reverse-chain update from perturbation level k to k-1."""
    _check_k(k, sched.k_steps)
    xk2 = np.atleast_2d(np.asarray(xk, dtype=np.float32))
    eps_hat = denoiser.forward_np(xk2, k, cond)
    z = np.asarray(z, dtype=np.float32)
    if eps_hat.shape != xk2.shape or z.reshape(xk2.shape).shape != xk2.shape:
        raise ValueError(
            f"reverse_step: mismatched dims xk {xk2.shape}, eps_hat {eps_hat.shape}, z {z.shape}"
        )
    j = k - 1
    out = sched.rescale[j] * (xk2 + sched.eps_coef[j] * eps_hat) \
        + sched.sigma[j] * z.reshape(xk2.shape)
    return out.reshape(np.shape(xk))


def chain_noise(rng: Rng, k_steps: int, dim: int):
    """Draw the initial state and per-step noise for one reverse chain,
    in the canonical order: x_K first, then z for k = K..2 (z_1 is zero)."""
    x_init = rng.normal((dim,))
    z = np.zeros((k_steps, dim), dtype=np.float32)
    for i in range(k_steps - 1):
        z[i] = rng.normal((dim,))
    return x_init, z


def sample(cond, denoiser, sched: NoiseSchedule, rng: Rng) -> np.ndarray:
    """Run the full reverse chain for one condition vector. Reference
    implementation; `sample_batch` is the vectorized equivalent."""
    dim = denoiser.state_dim
    x_init, z = chain_noise(rng, sched.k_steps, dim)
    x = x_init
    for i, k in enumerate(range(sched.k_steps, 0, -1)):
        x = reverse_step(x, k, None if cond is None else np.atleast_2d(cond), denoiser,
                         sched, z[i])
    return x


def sample_batch(cond: np.ndarray | None, denoiser, sched: NoiseSchedule,
                 rngs: list[Rng], batch: int | None = None) -> np.ndarray:
    """Sample one state per rng stream, all chains running in lockstep.

    Per-stream draws happen in the same order as `sample`, so each row
    matches a sequential `sample` call with that stream (up to float
    summation-order effects of the active backend).
    """
    n = len(rngs) if batch is None else batch
    dim = denoiser.state_dim
    x_init = np.empty((n, dim), dtype=np.float32)
    z = np.zeros((sched.k_steps, n, dim), dtype=np.float32)
    for s, rng in enumerate(rngs):
        xi, zi = chain_noise(rng, sched.k_steps, dim)
        x_init[s] = xi
        z[:, s, :] = zi
    if cond is None:
        cond = np.zeros((n, 0), dtype=np.float32)
    w = denoiser.net.layers
    return kernels.denoise_chain(
        x_init, denoiser.emb_table(), np.ascontiguousarray(cond, dtype=np.float32), z,
        sched.rescale, sched.eps_coef, sched.sigma,
        w[0].w.data, w[0].b.data, w[1].w.data, w[1].b.data, w[2].w.data, w[2].b.data)


def ddpm_loss(denoiser, x0: np.ndarray, cond: ad.Tensor | None,
              sched: NoiseSchedule, rng: Rng) -> ad.Tensor:
    """Noise-prediction loss: |eps - eps_hat|^2 summed over state dims,
    averaged over the batch, at a uniformly drawn step k per row."""
    x0 = np.atleast_2d(np.asarray(x0))
    n = x0.shape[0]
    k = rng.integers(1, sched.k_steps + 1, (n,))
    eps = rng.normal(x0.shape, dtype=ad.default_dtype())
    xk = forward_noise(x0.astype(eps.dtype), k, eps, sched)
    eps_hat = denoiser.forward_t(ad.constant(xk), k, cond)
    return ad.row_sse_mean(eps_hat, ad.constant(eps))


class Denoiser:
    """MLP noise predictor over [perturbed state | step embedding | condition]."""

    def __init__(self, state_dim: int, cond_dim: int, k_steps: int, rng: Rng,
                 hidden=(128, 128), emb_dim: int = 32):
        if len(hidden) != 2:
            raise ValueError("denoiser uses exactly two hidden layers")
        self.state_dim = int(state_dim)
        self.cond_dim = int(cond_dim)
        self.k_steps = int(k_steps)
        self.emb_dim = int(emb_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.net = Mlp([state_dim + emb_dim + cond_dim, *hidden, state_dim], rng)
        self._emb_cache: dict[int, np.ndarray] = {}

    def emb_table(self, k_steps: int | None = None) -> np.ndarray:
        """Sinusoidal embeddings of k/K for k = 1..K, one row per step."""
        k_steps = self.k_steps if k_steps is None else int(k_steps)
        table = self._emb_cache.get(k_steps)
        if table is None:
            half = self.emb_dim // 2
            freqs = np.pi * np.exp2(np.linspace(0.0, 8.0, half))
            t = (np.arange(1, k_steps + 1, dtype=np.float64) / k_steps)[:, None]
            table = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)
            table = np.ascontiguousarray(table, dtype=np.float32)
            self._emb_cache[k_steps] = table
        return table

    def _emb_rows(self, k, n: int) -> np.ndarray:
        j = np.asarray(k) - 1
        rows = self.emb_table()[j]
        if rows.ndim == 1:
            rows = np.broadcast_to(rows, (n, self.emb_dim))
        return np.ascontiguousarray(rows)

    def forward_np(self, xk: np.ndarray, k, cond: np.ndarray | None) -> np.ndarray:
        xk = np.ascontiguousarray(xk, dtype=np.float32)
        if cond is None:
            cond = np.zeros((xk.shape[0], 0), dtype=np.float32)
        emb = self._emb_rows(k, xk.shape[0])
        w = self.net.layers
        return kernels.denoiser_apply(
            xk, emb, np.ascontiguousarray(cond, dtype=np.float32),
            w[0].w.data, w[0].b.data, w[1].w.data, w[1].b.data, w[2].w.data, w[2].b.data)

    def forward_t(self, xk: ad.Tensor, k, cond: ad.Tensor | None) -> ad.Tensor:
        emb = ad.constant(self._emb_rows(k, xk.shape[0]))
        parts = [xk, emb] if cond is None else [xk, emb, cond]
        return self.net.forward_t(ad.concat(parts))

    def params(self):
        return self.net.params()

    def named_params(self, prefix="denoiser"):
        return self.net.named_params(prefix)


class StateNormalizer:
    """Per-dimension shift/scale fitted on training ground-truth states."""

    def __init__(self, mean: np.ndarray, scale: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.scale = np.asarray(scale, dtype=np.float32)
        if np.any(self.scale <= 0):
            raise ValueError("normalizer scale must be positive")

    @classmethod
    def fit(cls, data: np.ndarray) -> "StateNormalizer":
        data = np.asarray(data, dtype=np.float64)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        std[std < 1e-6] = 1.0  # constant dims pass through unscaled
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "StateNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (x * self.scale + self.mean).astype(np.float32)

    def normalize_t(self, x: ad.Tensor) -> ad.Tensor:
        inv = ad.constant(1.0 / self.scale)
        shift = ad.constant(-self.mean / self.scale)
        return ad.affine(x, inv, shift)

    def denormalize_t(self, x: ad.Tensor) -> ad.Tensor:
        return ad.affine(x, ad.constant(self.scale), ad.constant(self.mean))
