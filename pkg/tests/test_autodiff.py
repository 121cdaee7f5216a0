"""Tape/op correctness: analytic cases, finite-difference oracle, linearity."""

import numpy as np
import pytest

from dndfilter import autodiff as ad
from dndfilter.nets import Mlp
from dndfilter.rng import Rng


def fd_gradient(fn, params, h=1e-5):
    """Central finite differences of a scalar fn w.r.t. each param entry."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_matmul_shape_rule():
    a = ad.constant(np.ones((2, 3)))
    b = ad.constant(np.ones((3, 1)))
    assert ad.matmul(a, b).shape == (2, 1)
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(a, ad.constant(np.ones((2, 2))))


def test_silu_at_zero():
    assert ad.silu(ad.constant(np.zeros((1, 1)))).data.item() == 0.0


def test_mse_identical_inputs():
    x = ad.constant(np.array([[1.0, 2.0]]))
    y = ad.constant(np.array([[1.0, 2.0]]))
    assert float(ad.mse(x, y).data) == 0.0


def test_shape_errors_report_op_and_shapes():
    a = ad.constant(np.ones((2, 3)))
    b = ad.constant(np.ones((4, 2)))
    with pytest.raises(ad.ShapeError) as err:
        ad.add(a, b)
    msg = str(err.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 2)" in msg


def test_scalar_linear_regression_grad():
    # loss = mse(w*x, y) with scalar w: dL/dw = 2(wx - y)x
    w = ad.parameter(np.array([[2.0]]))
    x = ad.constant(np.array([[3.0]]))
    y = ad.constant(np.array([[5.0]]))
    with ad.recording():
        loss = ad.mse(ad.matmul(x, w), y)
        ad.backward(loss)
    assert np.allclose(w.grad, 2 * (2 * 3 - 5) * 3)


def test_backward_rejects_non_scalar():
    w = ad.parameter(np.ones((2, 2)))
    with ad.recording():
        out = ad.mul(w, 2.0)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(out)


def test_constant_loss_leaves_grads_none():
    w = ad.parameter(np.ones((2, 2)))
    x = ad.constant(np.ones((1, 2)))
    with ad.recording():
        loss = ad.mse(x, ad.constant(np.zeros((1, 2))))
        with pytest.raises(RuntimeError, match="not on the active tape"):
            ad.backward(loss)
    assert w.grad is None


@pytest.mark.parametrize("seed", range(6))
def test_mlp_gradients_match_finite_differences(seed):
    """3-layer random net in 64-bit mode: every parameter entry matches the
    central-difference oracle within relative error 1e-4."""
    rng = Rng(seed)
    with ad.precision("float64"):
        dims = [int(d) for d in rng.integers(2, 9, (4,))]
        net = Mlp(dims, rng.substream("net"))
        x = ad.constant(rng.normal((3, dims[0]), dtype=np.float64))
        y = ad.constant(rng.normal((3, dims[-1]), dtype=np.float64))

        with ad.recording():
            loss = ad.mse(net.forward_t(x), y)
            ad.backward(loss)

        def loss_value():
            return float(ad.mse(net.forward_t(x), y).data)

        fd = fd_gradient(loss_value, net.params())
        for p, g_fd in zip(net.params(), fd):
            rel = np.abs(p.grad - g_fd) / np.maximum(
                np.maximum(np.abs(p.grad), np.abs(g_fd)), 1e-8)
            assert rel.max() < 1e-4


def test_fused_ops_gradients_match_finite_differences():
    """Covers concat, affine, silu/relu, select_cols, sin/cos, row_sse_mean."""
    rng = Rng(99)
    with ad.precision("float64"):
        w1 = ad.parameter(rng.normal((4, 3), dtype=np.float64))
        w2 = ad.parameter(rng.normal((2, 3), dtype=np.float64))
        scale = ad.parameter(rng.normal((6,), dtype=np.float64))
        shift = ad.parameter(rng.normal((6,), dtype=np.float64))
        x = ad.constant(rng.normal((5, 4), dtype=np.float64))
        z = ad.constant(rng.normal((5, 2), dtype=np.float64))
        tgt = ad.constant(rng.normal((5, 2), dtype=np.float64))

        def forward():
            a = ad.silu(ad.matmul(x, w1))
            b = ad.relu(ad.add(ad.matmul(z, w2), ad.constant(np.full(3, 0.3))))
            c = ad.affine(ad.concat([a, b]), scale, shift)
            d = ad.concat([ad.sin(ad.select_cols(c, 0, 1)),
                           ad.cos(ad.select_cols(c, 3, 4))])
            return ad.row_sse_mean(ad.mul(d, ad.constant(np.full((5, 2), 0.7))), tgt)

        params = [w1, w2, scale, shift]
        with ad.recording():
            loss = forward()
            ad.backward(loss)
        fd = fd_gradient(lambda: float(forward().data), params)
        for p, g_fd in zip(params, fd):
            rel = np.abs(p.grad - g_fd) / np.maximum(
                np.maximum(np.abs(p.grad), np.abs(g_fd)), 1e-8)
            assert rel.max() < 1e-4


def test_backward_is_linear():
    """grad(a*L1 + b*L2) = a*grad(L1) + b*grad(L2)."""
    rng = Rng(5)
    with ad.precision("float64"):
        w = ad.parameter(rng.normal((3, 3), dtype=np.float64))
        x = ad.constant(rng.normal((2, 3), dtype=np.float64))
        y1 = ad.constant(rng.normal((2, 3), dtype=np.float64))
        y2 = ad.constant(rng.normal((2, 3), dtype=np.float64))
        a, b = 0.7, -1.3

        def l1():
            return ad.mse(ad.matmul(x, w), y1)

        def l2():
            return ad.mse(ad.silu(ad.matmul(x, w)), y2)

        with ad.recording():
            ad.backward(l1())
        g1 = w.grad.copy()
        w.zero_grad()
        with ad.recording():
            ad.backward(l2())
        g2 = w.grad.copy()
        w.zero_grad()
        with ad.recording():
            combined = ad.add(ad.mul(l1(), a), ad.mul(l2(), b))
            ad.backward(combined)
        assert np.allclose(w.grad, a * g1 + b * g2, rtol=1e-10, atol=1e-12)


def test_grad_buffers_do_not_alias_values():
    w = ad.parameter(np.ones((2, 2)))
    with ad.recording():
        loss = ad.mse(ad.mul(w, 1.0), ad.constant(np.zeros((2, 2))))
        ad.backward(loss)
    assert w.grad is not None
    before = w.data.copy()
    w.grad[...] = 123.0
    assert np.array_equal(w.data, before)


def test_wrap_angle_range_and_boundary():
    vals = np.array([-np.pi, np.pi, 0.0, 3 * np.pi / 2, -3 * np.pi / 2, 7.0])
    wrapped = ad.wrap_angle_np(vals)
    assert np.all(wrapped > -np.pi) and np.all(wrapped <= np.pi)
    assert wrapped[0] == pytest.approx(np.pi)   # -pi maps into (-pi, pi]
    assert wrapped[1] == pytest.approx(np.pi)
    assert wrapped[3] == pytest.approx(-np.pi / 2)
