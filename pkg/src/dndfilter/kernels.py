"""Backend selection for the inference hot-path kernels.

The compiled Cython extension is used when it was built; otherwise (or when
DNDFILTER_BACKEND=fallback is set) the pure-numpy implementations run. Both
expose the same functions with matching semantics, so either backend is a
drop-in for the other.
"""

from __future__ import annotations

import contextlib
import os

from . import _kernels_fallback as fallback

try:
    from . import _kernels as compiled
except ImportError:
    compiled = None

_requested = os.environ.get("DNDFILTER_BACKEND", "auto")
if _requested == "fallback":
    _active = fallback
elif _requested == "compiled":
    if compiled is None:
        raise RuntimeError("DNDFILTER_BACKEND=compiled but the extension is not built")
    _active = compiled
elif _requested == "auto":
    _active = compiled if compiled is not None else fallback
else:
    raise RuntimeError(f"unknown DNDFILTER_BACKEND value: {_requested!r}")


def backend_name() -> str:
    return _active.NAME


def backends() -> dict:
    """All available backends by name (for parity tests and benchmarks)."""
    out = {"fallback": fallback}
    if compiled is not None:
        out["compiled"] = compiled
    return out


def get_backend(name: str | None = None):
    if name is None:
        return _active
    try:
        return backends()[name]
    except KeyError:
        raise RuntimeError(f"backend {name!r} is not available") from None


@contextlib.contextmanager
def use_backend(name: str | None):
    """Temporarily route kernel calls through the named backend."""
    global _active
    old = _active
    _active = get_backend(name)
    try:
        yield
    finally:
        _active = old


def linear(x, w, b):
    return _active.linear(x, w, b)


def linear_silu(x, w, b):
    return _active.linear_silu(x, w, b)


def denoiser_apply(xk, emb, cond, w1, b1, w2, b2, w3, b3):
    return _active.denoiser_apply(xk, emb, cond, w1, b1, w2, b2, w3, b3)


def denoise_chain(x_init, emb_table, cond, z, rescale, eps_coef, sigma,
                  w1, b1, w2, b2, w3, b3):
    return _active.denoise_chain(x_init, emb_table, cond, z, rescale, eps_coef,
                                 sigma, w1, b1, w2, b2, w3, b3)
