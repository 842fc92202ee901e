# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row-softmax kernels.

Same contract as the numpy fallback: softmax_scaled(x, scale) applies a
max-stabilized row softmax to x * scale along the last axis, softmax_vjp(a, g)
is its backward pass. Inputs of any leading shape are accepted; the core loops
run over a 2-D view.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

NAME = "cython"


cdef void _softmax_rows(const double[:, ::1] x, double scale, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s, v
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            v = exp((x[i, j] - m) * scale)
            out[i, j] = v
            s += v
        for j in range(k):
            out[i, j] /= s


cdef void _vjp_rows(const double[:, ::1] a, const double[:, ::1] g, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * a[i, j]
        for j in range(k):
            out[i, j] = a[i, j] * (g[i, j] - dot)


def softmax_scaled(x, double scale):
    """Row softmax of ``x * scale`` along the last axis, max-stabilized."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    shape = arr.shape
    # wraparound is off module-wide, so avoid negative tuple indices here
    cdef Py_ssize_t nd = arr.ndim
    if nd == 0 or shape[nd - 1] == 0:
        raise ValueError("softmax_scaled needs a non-empty last axis")
    flat = arr.reshape(-1, shape[nd - 1])
    out = np.empty_like(flat)
    _softmax_rows(flat, scale, out)
    return out.reshape(shape)


def softmax_vjp(a, g):
    """Backward pass of row softmax: dL/dz = a * (g - sum_k g_k a_k)."""
    aa = np.ascontiguousarray(a, dtype=np.float64)
    gg = np.ascontiguousarray(g, dtype=np.float64)
    if aa.shape != gg.shape:
        raise ValueError("softmax_vjp: a and g must have the same shape")
    shape = aa.shape
    cdef Py_ssize_t nd = aa.ndim
    if nd == 0 or shape[nd - 1] == 0:
        raise ValueError("softmax_vjp needs a non-empty last axis")
    fa = aa.reshape(-1, shape[nd - 1])
    fg = gg.reshape(-1, shape[nd - 1])
    out = np.empty_like(fa)
    _vjp_rows(fa, fg, out)
    return out.reshape(shape)
