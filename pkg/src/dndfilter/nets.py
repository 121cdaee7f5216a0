"""Small MLP building blocks with a tape-based training path and a
kernel-backed inference path."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .rng import Rng


class Linear:
    """Dense layer holding weight (n_in, n_out) and bias (n_out,)."""

    def __init__(self, n_in: int, n_out: int, rng: Rng, w_scale: float | None = None):
        scale = w_scale if w_scale is not None else float(np.sqrt(1.0 / n_in))
        w = rng.normal((n_in, n_out), dtype=np.float64) * scale
        self.w = ad.parameter(w)
        self.b = ad.parameter(np.zeros(n_out))

    def forward_t(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        return kernels.linear(np.ascontiguousarray(x), self.w.data, self.b.data)

    def params(self) -> list[ad.Tensor]:
        return [self.w, self.b]

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class Mlp:
    """Feed-forward net, SiLU on hidden layers, linear output."""

    def __init__(self, dims: list[int], rng: Rng):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            scale = np.sqrt(1.0 / n_in) if last else np.sqrt(2.0 / n_in)
            self.layers.append(Linear(n_in, n_out, rng.substream("layer", i), scale))

    def forward_t(self, x: ad.Tensor) -> ad.Tensor:
        for layer in self.layers[:-1]:
            x = ad.silu(layer.forward_t(x))
        return self.layers[-1].forward_t(x)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float32)
        for layer in self.layers[:-1]:
            x = kernels.linear_silu(x, layer.w.data, layer.b.data)
        return kernels.linear(x, self.layers[-1].w.data, self.layers[-1].b.data)

    def params(self) -> list[ad.Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.{i}"))
        return out
