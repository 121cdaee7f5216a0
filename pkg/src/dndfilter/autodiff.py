"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Define-by-run: ops executed inside a `recording()` block append (output,
backward-closure) pairs to a fresh tape, and `backward()` replays the tape
once in reverse, accumulating gradients additively into `Tensor.grad`.
Gradients are never reset implicitly; call `zero_grad()` (or the optimizer's)
between steps.

Values default to float32. The `precision("float64")` context switches newly
created tensors to float64 for gradient verification against finite
differences; it does not convert existing tensors.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


_DEFAULT_DTYPE = np.float32
_TAPE: list | None = None


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily set the dtype for newly created tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


class Tensor:
    """A dense array plus an additively-accumulated gradient buffer.

    The value buffer and the gradient buffer never alias: `_accumulate`
    always allocates a fresh zero buffer on first touch.
    """

    __slots__ = ("data", "grad", "requires_grad", "recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


@contextlib.contextmanager
def recording():
    """Open a fresh tape; ops run inside are recorded for backward()."""
    global _TAPE
    if _TAPE is not None:
        raise RuntimeError("a tape is already active; recording() does not nest")
    _TAPE = []
    try:
        yield
    finally:
        _TAPE = None


def _record(out: Tensor, parents, backward_fn) -> Tensor:
    if _TAPE is not None and any(p.requires_grad or p.recorded for p in parents):
        out.recorded = True
        _TAPE.append((out, backward_fn))
    return out


def backward(loss: Tensor):
    """Propagate d(loss)/d(node) through the active tape in reverse order.

    Every tensor reachable from `loss` receives its gradient in `.grad`;
    unreachable tensors are left with `grad is None` (read as zero).
    """
    if _TAPE is None:
        raise RuntimeError("backward() requires an active recording() block")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.recorded:
        raise RuntimeError("backward: loss is not on the active tape")
    loss._accumulate(np.ones_like(loss.data))
    for out, bw in reversed(_TAPE):
        if out.grad is not None:
            bw(out.grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad or a.recorded:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b.recorded:
            b._accumulate(a.data.T @ g)

    return _record(out, (a, b), bw)


def _reduce_like(g, shape):
    """Sum g down to `shape` for the bias/scalar broadcast cases."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    return g.sum(axis=0)  # (m, n) -> (n,)


def _binary_check(op, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return  # row-vector shift/scale over a batch
    if b.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad or a.recorded:
            a._accumulate(g)
        if b.requires_grad or b.recorded:
            b._accumulate(_reduce_like(g, b.shape))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("sub", a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad or a.recorded:
            a._accumulate(g)
        if b.requires_grad or b.recorded:
            b._accumulate(-_reduce_like(g, b.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a tensor (same shape / row / scalar)
    or a plain python number."""
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * s)

        def bw_s(g):
            if a.requires_grad or a.recorded:
                a._accumulate(g * s)

        return _record(out, (a,), bw_s)

    _binary_check("mul", a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad or a.recorded:
            a._accumulate(g * b.data)
        if b.requires_grad or b.recorded:
            b._accumulate(_reduce_like(g * a.data, b.shape))

    return _record(out, (a, b), bw)


def affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Row-wise x * scale + shift with (n,) or scalar scale/shift."""
    _binary_check("affine", x, scale)
    _binary_check("affine", x, shift)
    out = Tensor(x.data * scale.data + shift.data)

    def bw(g):
        if x.requires_grad or x.recorded:
            x._accumulate(g * scale.data)
        if scale.requires_grad or scale.recorded:
            scale._accumulate(_reduce_like(g * x.data, scale.shape))
        if shift.requires_grad or shift.recorded:
            shift._accumulate(_reduce_like(g, shift.shape))

    return _record(out, (x, scale, shift), bw)


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    rows = {p.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(rows) != 1:
        raise ShapeError(f"concat: need 2-D tensors with equal rows, got {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p.recorded:
                p._accumulate(g[:, lo:hi])

    return _record(out, tuple(parts), bw)


def select_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"select_cols: bad slice [{lo}:{hi}] of {x.shape}")
    out = Tensor(x.data[:, lo:hi].copy())

    def bw(g):
        if x.requires_grad or x.recorded:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            x._accumulate(full)

    return _record(out, (x,), bw)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)

    def bw(g):
        if x.requires_grad or x.recorded:
            x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _record(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bw(g):
        if x.requires_grad or x.recorded:
            x._accumulate(g * (x.data > 0))

    return _record(out, (x,), bw)


def sin(x: Tensor) -> Tensor:
    out = Tensor(np.sin(x.data))

    def bw(g):
        if x.requires_grad or x.recorded:
            x._accumulate(g * np.cos(x.data))

    return _record(out, (x,), bw)


def cos(x: Tensor) -> Tensor:
    out = Tensor(np.cos(x.data))

    def bw(g):
        if x.requires_grad or x.recorded:
            x._accumulate(-g * np.sin(x.data))

    return _record(out, (x,), bw)


def wrap_angle_np(x: np.ndarray | float):
    """Wrap to (-pi, pi]."""
    return -((np.pi - x) % (2.0 * np.pi) - np.pi)


def wrap_angle(x: Tensor) -> Tensor:
    """Angle wrap with pass-through gradient (identity a.e.)."""
    out = Tensor(wrap_angle_np(x.data))

    def bw(g):
        if x.requires_grad or x.recorded:
            x._accumulate(g)

    return _record(out, (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements (scalar)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=a.data.dtype))
    inv_n = 2.0 / diff.size

    def bw(g):
        gd = g * inv_n * diff
        if a.requires_grad or a.recorded:
            a._accumulate(gd)
        if b.requires_grad or b.recorded:
            b._accumulate(-gd)

    return _record(out, (a, b), bw)


def row_sse_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the squared euclidean row difference |a_i - b_i|^2."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"row_sse_mean: need equal 2-D shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray((diff * diff).sum(axis=1).mean(), dtype=a.data.dtype))
    inv_rows = 2.0 / a.shape[0]

    def bw(g):
        gd = g * inv_rows * diff
        if a.requires_grad or a.recorded:
            a._accumulate(gd)
        if b.requires_grad or b.recorded:
            b._accumulate(-gd)

    return _record(out, (a, b), bw)
