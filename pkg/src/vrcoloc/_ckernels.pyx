# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gate-sum kernel for relation-network score matrices."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fmin, fmax

cnp.import_array()


cdef inline void _row(const double* a_in, const double* b_in, const double* w,
                      double* buf, Py_ssize_t dp) noexcept nogil:
    # tanh(a) = 1 - 2 / (1 + e^{2a}); pre-activations are clamped so the
    # exponentials stay finite (tanh(+-20) and sigmoid(+-40) round to +-1/0/1).
    # Every pointer is private 64-byte aligned scratch, so the compiler's
    # split between vector and scalar iterations depends on dp alone.
    cdef Py_ssize_t k
    cdef double a, b
    for k in range(dp):
        a = fmin(fmax(a_in[k], -20.0), 20.0)
        b = fmin(fmax(b_in[k], -40.0), 40.0)
        buf[k] = w[k] * (1.0 - 2.0 / (1.0 + exp(2.0 * a))) / (1.0 + exp(-b))


cdef _aligned(Py_ssize_t size):
    raw = np.zeros(size + 8, dtype=np.float64)
    cdef Py_ssize_t shift = ((-raw.ctypes.data) % 64) // 8
    return raw[shift:shift + size]


def gated_sums(const double[:, ::1] P1, const double[:, ::1] Q1,
               const double[:, ::1] P2, const double[:, ::1] Q2,
               const double[::1] w):
    cdef Py_ssize_t n = P1.shape[0]
    cdef Py_ssize_t m = Q1.shape[0]
    cdef Py_ssize_t d = P1.shape[1]
    cdef Py_ssize_t dp = ((d + 7) // 8) * 8
    cdef Py_ssize_t i, j, k
    cdef double acc
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] G = out
    # Private aligned, zero-padded scratch: an entry's bits must not depend on
    # input addresses, slicing, or which rows share the call. Padding lanes
    # carry w = 0 and contribute exact zeros to the sum.
    cdef double[::1] A = _aligned(max(dp, 8))
    cdef double[::1] B = _aligned(max(dp, 8))
    cdef double[::1] W = _aligned(max(dp, 8))
    cdef double[::1] buf = _aligned(max(dp, 8))
    for k in range(d):
        W[k] = w[k]
    if d == 0:
        return np.zeros((n, m), dtype=np.float64)
    with nogil:
        for i in range(n):
            for j in range(m):
                for k in range(d):
                    A[k] = P1[i, k] + Q1[j, k]
                    B[k] = P2[i, k] + Q2[j, k]
                _row(&A[0], &B[0], &W[0], &buf[0], dp)
                acc = 0.0
                for k in range(dp):
                    acc = acc + buf[k]
                G[i, j] = acc
    return out
