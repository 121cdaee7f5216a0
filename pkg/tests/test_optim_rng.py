"""Adam update rules, divergence handling, and rng stream contracts."""

import numpy as np
import pytest

from dndfilter import autodiff as ad
from dndfilter.optim import Adam, TrainingDiverged, clip_global_norm
from dndfilter.rng import Rng, mix_seed


def test_zero_gradient_leaves_params_unchanged():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = Adam([p])
    p.grad = np.zeros(2, dtype=p.data.dtype)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_first_step_magnitude_is_lr_times_sign():
    # Hand-computed: m=0.1g, v=0.001g^2, bias correction gives
    # m_hat/sqrt(v_hat) = sign(g), so |delta| ~= lr.
    p = ad.parameter(np.array([0.5, -0.5, 2.0]))
    g = np.array([0.3, -4.0, 1e-3], dtype=np.float32)
    opt = Adam([p], lr=1e-3)
    p.grad = g.copy()
    before = p.data.copy()
    opt.step()
    delta = p.data - before
    assert np.allclose(np.abs(delta), 1e-3, rtol=1e-4)
    assert np.all(np.sign(delta) == -np.sign(g))


def test_nan_gradient_rejects_step():
    p = ad.parameter(np.array([1.0]))
    opt = Adam([p])
    p.grad = np.array([np.nan], dtype=np.float32)
    before = p.data.copy()
    with pytest.raises(TrainingDiverged):
        opt.step()
    assert np.array_equal(p.data, before)
    assert opt.t == 0


def test_same_seed_same_parameters():
    def run():
        rng = Rng(7)
        p = ad.parameter(rng.normal((4, 4), dtype=np.float64))
        opt = Adam([p], lr=1e-2)
        for _ in range(5):
            p.grad = rng.normal((4, 4), dtype=np.float64)
            opt.step()
        return p.data

    assert np.array_equal(run(), run())


def test_clip_global_norm():
    p1 = ad.parameter(np.zeros(3))
    p2 = ad.parameter(np.zeros(2))
    p1.grad = np.array([3.0, 0.0, 0.0], dtype=np.float32)
    p2.grad = np.array([0.0, 4.0], dtype=np.float32)
    norm = clip_global_norm([p1, p2], 1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt((p1.grad**2).sum() + (p2.grad**2).sum())
    assert clipped == pytest.approx(1.0, rel=1e-5)


# -- rng -------------------------------------------------------------------


def test_same_seed_same_sequence():
    a = Rng(123).normal((100,))
    b = Rng(123).normal((100,))
    assert np.array_equal(a, b)


def test_named_substreams_differ_and_are_stable():
    root = Rng(9)
    s1 = root.substream("alpha").normal((50,))
    s2 = root.substream("beta").normal((50,))
    s1_again = Rng(9).substream("alpha").normal((50,))
    assert not np.array_equal(s1, s2)
    assert np.array_equal(s1, s1_again)


def test_substream_derivation_ignores_draw_order():
    r1 = Rng(42)
    r1.normal((10,))  # advance the parent stream
    a = r1.substream("child").normal((5,))
    b = Rng(42).substream("child").normal((5,))
    assert np.array_equal(a, b)


def test_nested_and_integer_substreams():
    a = Rng(3).substream("ep", 4).normal((8,))
    b = Rng(3).substream("ep").substream(4).normal((8,))
    c = Rng(3).substream("ep", 5).normal((8,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pcg64_stream_is_platform_pinned():
    # Guards against silent generator/algorithm changes: these values are
    # fixed by numpy's PCG64 + SeedSequence stream compatibility guarantee.
    vals = Rng(2024).integers(0, 1 << 16, (4,))
    assert vals.tolist() == Rng(2024).integers(0, 1 << 16, (4,)).tolist()
    u = Rng(0).uniform(0.0, 1.0, (2,), dtype=np.float64)
    assert u[0] == pytest.approx(0.6369616873214543, abs=1e-15)


def test_mix_seed_stable_and_distinct():
    assert mix_seed(1, "train", 0) == mix_seed(1, "train", 0)
    assert mix_seed(1, "train", 0) != mix_seed(1, "test", 0)
    assert 0 <= mix_seed(99, "x") < 2**63
