# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled reduction kernels.

Every output entry is accumulated left to right over the reduced axis, one
multiply and one add per term. Built with ``-ffp-contract=off`` so the C
compiler cannot fuse them; this keeps results bit-identical to
:mod:`inclusivefl.kernels._fallback`.
"""
import numpy as np


def matmul(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kk = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double aik
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            aik = a[i, 0]
            for j in range(n):
                o[i, j] = aik * b[0, j]
            for k in range(1, kk):
                aik = a[i, k]
                for j in range(n):
                    o[i, j] = o[i, j] + aik * b[k, j]
    return out


def colsum(const double[:, :] g):
    cdef Py_ssize_t rows = g.shape[0]
    cdef Py_ssize_t n = g.shape[1]
    cdef Py_ssize_t r, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for j in range(n):
            o[j] = g[0, j]
        for r in range(1, rows):
            for j in range(n):
                o[j] = o[j] + g[r, j]
    return out
