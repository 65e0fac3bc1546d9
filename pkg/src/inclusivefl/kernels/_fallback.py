"""Pure numpy versions of the compiled kernels.

Summation order matches ``_core.pyx`` term for term, so both backends
produce the same bits. Slower, mostly because of the Python loop over the
reduced axis.
"""
import numpy as np


def matmul(a, b):
    out = a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def colsum(g):
    out = np.array(g[0], dtype=np.float64, copy=True)
    for r in range(1, g.shape[0]):
        out += g[r]
    return out
