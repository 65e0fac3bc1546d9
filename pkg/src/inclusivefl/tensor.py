"""Dense float64 tensor helpers and seeded random streams.

Tensors are plain C-contiguous ``numpy.float64`` arrays. The helpers here add
the shape contracts numpy does not enforce: no broadcasting, and matrix
products routed through the fixed-order kernels in :mod:`inclusivefl.kernels`.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError

# stream tags for Rng.child; keep stable, they feed the seed of every run
TAG_INIT = 1
TAG_SAMPLE = 2
TAG_LOCAL = 3
TAG_DATA = 4
TAG_SPLIT = 5
TAG_ASSIGN = 6
TAG_WARP = 7


class Rng:
    """Seeded random stream built on the counter-based Philox generator.

    Children are derived from ``(seed, *keys)`` through ``SeedSequence``, so a
    client's stream depends only on its id and the round, never on how many
    draws other clients made before it.
    """

    # SeedSequence ignores trailing zero words, so the entropy carries a fixed
    # two-word seed and the key count ahead of the keys.

    def __init__(self, seed: int, keys: tuple[int, ...] = ()):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        if any(not 0 <= k < 2**32 for k in self.keys):
            raise ValueError("stream keys must fit in 32 bits")
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32, len(self.keys), *self.keys]
        seq = np.random.SeedSequence(words)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.keys + tuple(keys))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace, p=p)

    def __repr__(self):
        return f"Rng(seed={self.seed}, keys={self.keys})"


def as_tensor(data, shape=None) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 0 or 0 in arr.shape:
        raise DimensionError(f"tensor shape must be non-empty with positive sizes, got {arr.shape}")
    return arr


def _check_same(x: np.ndarray, y: np.ndarray, what: str):
    if x.shape != y.shape:
        raise DimensionError(f"{what}: shape mismatch {x.shape} vs {y.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with left-to-right summation over the inner dimension."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        raise DimensionError(f"matmul: empty inner dimension in {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def colsum(g: np.ndarray) -> np.ndarray:
    """Sum over rows, accumulated in row order."""
    if g.ndim != 2 or g.shape[0] == 0:
        raise DimensionError(f"colsum: expected a non-empty matrix, got {g.shape}")
    return kernels.colsum(g)


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same(x, y, "axpy")
    return alpha * x + y


def randn(shape, scale: float, rng: Rng) -> np.ndarray:
    """I.i.d. Gaussian entries with standard deviation ``scale``."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise DimensionError(f"randn: invalid shape {shape}")
    if not scale > 0:
        raise ValueError(f"randn: scale must be positive, got {scale}")
    return scale * rng.normal(shape)
