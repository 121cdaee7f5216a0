# Compiled inference kernels: fused linear layers and the reverse-diffusion
# chain. Semantics mirror _kernels_fallback.py; accumulation order is the
# row-saxpy order below, fixed per build, so outputs are deterministic.

import numpy as np

cimport numpy as cnp
from libc.math cimport expf

cnp.import_array()

NAME = "compiled"


cdef inline void _affine_rows(const float[:, ::1] x, const float[:, ::1] w,
                              const float[::1] b, float[:, ::1] out) noexcept nogil:
    # out = x @ w + b, accumulated saxpy-style over the input index.
    cdef Py_ssize_t rows = x.shape[0], nin = x.shape[1], nout = w.shape[1]
    cdef Py_ssize_t r, i, j
    cdef float xi
    for r in range(rows):
        for j in range(nout):
            out[r, j] = b[j]
        for i in range(nin):
            xi = x[r, i]
            for j in range(nout):
                out[r, j] += xi * w[i, j]


cdef inline void _silu_inplace(float[:, ::1] x) noexcept nogil:
    cdef Py_ssize_t r, j
    for r in range(x.shape[0]):
        for j in range(x.shape[1]):
            x[r, j] = x[r, j] / (1.0 + expf(-x[r, j]))


def linear(const float[:, ::1] x, const float[:, ::1] w, const float[::1] b):
    out = np.empty((x.shape[0], w.shape[1]), dtype=np.float32)
    cdef float[:, ::1] mv = out
    with nogil:
        _affine_rows(x, w, b, mv)
    return out


def linear_silu(const float[:, ::1] x, const float[:, ::1] w, const float[::1] b):
    out = np.empty((x.shape[0], w.shape[1]), dtype=np.float32)
    cdef float[:, ::1] mv = out
    with nogil:
        _affine_rows(x, w, b, mv)
        _silu_inplace(mv)
    return out


cdef void _mlp3(const float[:, ::1] buf_in,
                const float[:, ::1] w1, const float[::1] b1,
                const float[:, ::1] w2, const float[::1] b2,
                const float[:, ::1] w3, const float[::1] b3,
                float[:, ::1] h1, float[:, ::1] h2,
                float[:, ::1] out) noexcept nogil:
    _affine_rows(buf_in, w1, b1, h1)
    _silu_inplace(h1)
    _affine_rows(h1, w2, b2, h2)
    _silu_inplace(h2)
    _affine_rows(h2, w3, b3, out)


def denoiser_apply(const float[:, ::1] xk, const float[:, ::1] emb,
                   const float[:, ::1] cond,
                   const float[:, ::1] w1, const float[::1] b1,
                   const float[:, ::1] w2, const float[::1] b2,
                   const float[:, ::1] w3, const float[::1] b3):
    cdef Py_ssize_t rows = xk.shape[0], d = xk.shape[1]
    cdef Py_ssize_t e = emb.shape[1], c = cond.shape[1]
    cdef Py_ssize_t r, j
    buf_in = np.empty((rows, w1.shape[0]), dtype=np.float32)
    h1 = np.empty((rows, w1.shape[1]), dtype=np.float32)
    h2 = np.empty((rows, w2.shape[1]), dtype=np.float32)
    out = np.empty((rows, w3.shape[1]), dtype=np.float32)
    cdef float[:, ::1] vin = buf_in, v1 = h1, v2 = h2, vo = out
    with nogil:
        for r in range(rows):
            for j in range(d):
                vin[r, j] = xk[r, j]
            for j in range(e):
                vin[r, d + j] = emb[r, j]
            for j in range(c):
                vin[r, d + e + j] = cond[r, j]
        _mlp3(vin, w1, b1, w2, b2, w3, b3, v1, v2, vo)
    return out


def denoise_chain(const float[:, ::1] x_init, const float[:, ::1] emb_table,
                  const float[:, ::1] cond, const float[:, :, ::1] z,
                  const float[::1] rescale, const float[::1] eps_coef,
                  const float[::1] sigma,
                  const float[:, ::1] w1, const float[::1] b1,
                  const float[:, ::1] w2, const float[::1] b2,
                  const float[:, ::1] w3, const float[::1] b3):
    cdef Py_ssize_t k_steps = emb_table.shape[0]
    cdef Py_ssize_t rows = x_init.shape[0], d = x_init.shape[1]
    cdef Py_ssize_t e = emb_table.shape[1], c = cond.shape[1]
    cdef Py_ssize_t i, j, r, m
    x = np.array(x_init, dtype=np.float32, copy=True)
    buf_in = np.empty((rows, w1.shape[0]), dtype=np.float32)
    h1 = np.empty((rows, w1.shape[1]), dtype=np.float32)
    h2 = np.empty((rows, w2.shape[1]), dtype=np.float32)
    eps = np.empty((rows, d), dtype=np.float32)
    cdef float[:, ::1] vx = x, vin = buf_in, v1 = h1, v2 = h2, ve = eps
    with nogil:
        for i in range(k_steps):
            j = k_steps - 1 - i  # schedule index of step k = j + 1
            for r in range(rows):
                for m in range(d):
                    vin[r, m] = vx[r, m]
                for m in range(e):
                    vin[r, d + m] = emb_table[j, m]
                for m in range(c):
                    vin[r, d + e + m] = cond[r, m]
            _mlp3(vin, w1, b1, w2, b2, w3, b3, v1, v2, ve)
            for r in range(rows):
                for m in range(d):
                    vx[r, m] = rescale[j] * (vx[r, m] + eps_coef[j] * ve[r, m]) \
                        + sigma[j] * z[i, r, m]
    return x
