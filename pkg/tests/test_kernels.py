"""Compiled-vs-fallback kernel parity and backend selection."""

import numpy as np
import pytest

from dndfilter import kernels
from dndfilter.rng import Rng


def _weights(rng, n_in, hidden, n_out):
    w1 = rng.normal((n_in, hidden)) * 0.3
    b1 = rng.normal((hidden,)) * 0.1
    w2 = rng.normal((hidden, hidden)) * 0.3
    b2 = rng.normal((hidden,)) * 0.1
    w3 = rng.normal((hidden, n_out)) * 0.3
    b3 = rng.normal((n_out,)) * 0.1
    return w1, b1, w2, b2, w3, b3


def test_backend_selection_reports_name():
    assert kernels.backend_name() in ("compiled", "fallback")
    assert "fallback" in kernels.backends()


def test_use_backend_context_switches_and_restores():
    original = kernels.backend_name()
    with kernels.use_backend("fallback"):
        assert kernels.backend_name() == "fallback"
    assert kernels.backend_name() == original


def test_unknown_backend_rejected():
    with pytest.raises(RuntimeError, match="not available"):
        kernels.get_backend("gpu")


@pytest.mark.skipif(len(kernels.backends()) < 2, reason="extension not built")
class TestParity:
    def setup_method(self):
        self.rng = Rng(77)
        self.fb = kernels.get_backend("fallback")
        self.co = kernels.get_backend("compiled")

    def test_linear_and_silu(self):
        x = self.rng.normal((9, 13))
        w = self.rng.normal((13, 6))
        b = self.rng.normal((6,))
        assert np.allclose(self.fb.linear(x, w, b), self.co.linear(x, w, b),
                           rtol=2e-4, atol=1e-5)
        assert np.allclose(self.fb.linear_silu(x, w, b),
                           self.co.linear_silu(x, w, b), rtol=2e-4, atol=1e-5)

    def test_denoiser_apply_per_row_embeddings(self):
        w = _weights(self.rng, 2 + 8 + 5, 32, 2)
        xk = self.rng.normal((6, 2))
        emb = self.rng.normal((6, 8))  # distinct embedding per row
        cond = self.rng.normal((6, 5))
        a = self.fb.denoiser_apply(xk, emb, cond, *w)
        b = self.co.denoiser_apply(xk, emb, cond, *w)
        assert np.allclose(a, b, rtol=2e-4, atol=1e-5)

    def test_denoise_chain(self):
        k_steps, batch, dim = 10, 4, 2
        w = _weights(self.rng, dim + 8 + 5, 32, dim)
        x0 = self.rng.normal((batch, dim))
        emb_table = self.rng.normal((k_steps, 8))
        cond = self.rng.normal((batch, 5))
        z = self.rng.normal((k_steps, batch, dim))
        z[-1] = 0.0
        rescale = 1.0 / np.sqrt(np.linspace(0.95, 0.5, k_steps, dtype=np.float32))
        eps_coef = -np.linspace(0.1, 0.9, k_steps, dtype=np.float32)
        sigma = np.sqrt(np.linspace(0.05, 0.5, k_steps, dtype=np.float32))
        sigma[0] = 0.0
        a = self.fb.denoise_chain(x0, emb_table, cond, z, rescale, eps_coef,
                                  sigma, *w)
        b = self.co.denoise_chain(x0, emb_table, cond, z, rescale, eps_coef,
                                  sigma, *w)
        assert np.allclose(a, b, rtol=1e-3, atol=1e-4)

    def test_empty_condition_width(self):
        w = _weights(self.rng, 2 + 8, 16, 2)
        xk = self.rng.normal((3, 2))
        emb = self.rng.normal((3, 8))
        cond = np.zeros((3, 0), dtype=np.float32)
        a = self.fb.denoiser_apply(xk, emb, cond, *w)
        b = self.co.denoiser_apply(xk, emb, cond, *w)
        assert np.allclose(a, b, rtol=2e-4, atol=1e-5)
