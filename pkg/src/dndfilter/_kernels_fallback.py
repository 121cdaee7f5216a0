"""Pure-numpy implementations of the inference hot-path kernels.

Semantics must match `_kernels.pyx` exactly up to float32 rounding: the
compiled module and this one are selected interchangeably at import time.
"""

from __future__ import annotations

import numpy as np

NAME = "fallback"


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_silu(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return silu(x @ w + b)


def denoiser_apply(xk, emb, cond, w1, b1, w2, b2, w3, b3):
    """One noise-prediction MLP pass on [xk | emb | cond]."""
    h = np.concatenate([xk, emb, cond], axis=1)
    h = silu(h @ w1 + b1)
    h = silu(h @ w2 + b2)
    return h @ w3 + b3


def denoise_chain(x_init, emb_table, cond, z, rescale, eps_coef, sigma,
                  w1, b1, w2, b2, w3, b3):
    """Run the reverse chain from step K down to 1.

    x_init: (B, D) initial draw; emb_table: (K, E) per-step embeddings
    (row j is step k=j+1); cond: (B, C); z: (K, B, D) per-step noise where
    z[i] belongs to step k=K-i (the k=1 slice must be zero).
    """
    k_steps = emb_table.shape[0]
    batch = x_init.shape[0]
    x = x_init.copy()
    for i in range(k_steps):
        j = k_steps - 1 - i  # schedule index for step k = j + 1
        emb = np.broadcast_to(emb_table[j], (batch, emb_table.shape[1]))
        eps = denoiser_apply(x, emb, cond, w1, b1, w2, b2, w3, b3)
        x = rescale[j] * (x + eps_coef[j] * eps) + sigma[j] * z[i]
    return x
