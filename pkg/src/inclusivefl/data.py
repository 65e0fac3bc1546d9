"""Synthetic classification data and client partitioning.

Samples are Gaussian class clusters, optionally pushed through a fixed random
nonlinear warp so that deeper models have something to gain. Dataset files
use a small documented binary layout (see :func:`save_dataset`).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .fed import ClientSpec, TierTopology
from .tensor import TAG_DATA, TAG_SPLIT, TAG_WARP, Rng, matmul


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "synthetic"

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels) or len(self.labels) == 0:
            raise DataError("dataset needs N >= 1 rows with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, name=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, name or self.name)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 3000
    input_dim: int = 10
    n_classes: int = 4
    spread: float = 1.0
    noise: float = 0.0
    warp_depth: int = 0
    clusters_per_class: int = 1


def warp_inputs(x: np.ndarray, depth: int, rng: Rng) -> np.ndarray:
    """Apply ``depth`` fixed random residual tanh maps: x <- x + 2 tanh(x A + b)."""
    d = x.shape[1]
    for i in range(depth):
        r = rng.child(i)
        a = r.normal((d, d)) * (1.5 / math.sqrt(d))
        b = r.normal(d) * 0.5
        x = x + 2.0 * np.tanh(matmul(x, a) + b)
    return x


def make_synthetic(spec: SyntheticSpec, rng: Rng, warp_rng: Rng | None = None, name: str = "synthetic") -> Dataset:
    """Gaussian clusters, label noise, optional warp.

    Each class owns ``clusters_per_class`` centers drawn once from ``rng``. A
    ``noise`` fraction of labels is replaced by a uniformly drawn class (which
    may coincide with the true one). The warp draws from ``warp_rng`` when
    given, so several datasets can share one warp.
    """
    if spec.n_classes < 2:
        raise DataError("need at least 2 classes")
    if spec.n < spec.n_classes:
        raise DataError(f"N={spec.n} is smaller than the class count {spec.n_classes}")
    if not spec.spread > 0:
        raise DataError("cluster spread must be positive")
    if not 0 <= spec.noise < 1:
        raise DataError("label noise must lie in [0, 1)")
    r = rng.child(TAG_DATA)
    k = spec.clusters_per_class
    centers = r.normal((spec.n_classes * k, spec.input_dim)) * 2.0
    # every class appears at least once, the rest are drawn uniformly
    labels = np.concatenate(
        [np.arange(spec.n_classes), r.integers(0, spec.n_classes, size=spec.n - spec.n_classes)]
    )
    labels = labels[r.permutation(spec.n)]
    which = labels * k + r.integers(0, k, size=spec.n)
    x = centers[which] + spec.spread * r.normal((spec.n, spec.input_dim))
    if spec.warp_depth:
        x = warp_inputs(x, spec.warp_depth, warp_rng or rng.child(TAG_WARP))
    n_flip = int(math.floor(spec.noise * spec.n))
    if n_flip:
        flip = r.choice(spec.n, size=n_flip, replace=False)
        labels = labels.copy()
        labels[flip] = r.integers(0, spec.n_classes, size=n_flip)
    return Dataset(x, labels, spec.n_classes, name)


@dataclass
class Partition:
    indices: np.ndarray
    train: np.ndarray
    eval: np.ndarray


def _sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def iid_split(dataset, n_clients: int, rng: Rng) -> list[Partition]:
    """Shuffle once, then cut contiguous chunks; the first ``N mod K`` get one extra."""
    n = len(dataset) if not isinstance(dataset, int) else dataset
    if n_clients < 1 or n_clients > n:
        raise DataError(f"cannot split {n} samples across {n_clients} clients")
    order = rng.child(TAG_SPLIT).permutation(n)
    parts = []
    start = 0
    for size in _sizes(n, n_clients):
        idx = np.sort(order[start : start + size])
        parts.append(Partition(idx, idx, np.empty(0, dtype=np.int64)))
        start += size
    return parts


def train_eval_split(n: int, train_fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    n_train = int(math.floor(train_fraction * n + 1e-9))
    if n_train < 1 or n_train > n:
        raise DataError(f"train fraction {train_fraction} leaves no training data for N={n}")
    order = rng.permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def silo_assign(
    datasets: list[Dataset],
    topology: TierTopology,
    rng: Rng,
    mapping=None,
    train_fraction: float = 0.8,
) -> list[ClientSpec]:
    """One client per dataset; by default dataset i goes to tier i (weakest first).

    ``mapping[i]`` overrides the tier for dataset i, e.g. to rotate which
    corpus lands on which device class.
    """
    if mapping is None:
        if len(datasets) != topology.n_tiers:
            raise ConfigError(
                f"{len(datasets)} silo datasets for {topology.n_tiers} tiers needs an explicit mapping"
            )
        mapping = list(range(len(datasets)))
    mapping = [int(m) for m in mapping]
    if len(mapping) != len(datasets) or any(not 0 <= m < topology.n_tiers for m in mapping):
        raise ConfigError(f"invalid silo mapping {mapping}")
    clients = []
    for i, (ds, tier) in enumerate(zip(datasets, mapping)):
        train, ev = train_eval_split(len(ds), train_fraction, rng.child(TAG_SPLIT, i))
        clients.append(ClientSpec(i, tier, i, train, ev))
    return clients


# Dataset file layout, little-endian:
#   magic b"IFLDATA\0", u32 version (= 1)
#   u64 N, u64 d_in, u64 c, u16 name length + UTF-8 name
#   N*d_in float64 inputs (row-major), then N int64 labels

DATA_MAGIC = b"IFLDATA\0"
DATA_VERSION = 1


def dataset_bytes(ds: Dataset) -> bytes:
    name = ds.name.encode()
    head = DATA_MAGIC + struct.pack("<IQQQH", DATA_VERSION, len(ds), ds.input_dim, ds.n_classes, len(name)) + name
    return head + ds.inputs.astype("<f8").tobytes() + ds.labels.astype("<i8").tobytes()


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return dataset_from_bytes(data)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def dataset_from_bytes(data: bytes) -> Dataset:
    if data[:8] != DATA_MAGIC:
        raise DataError("not a dataset file")
    head = struct.calcsize("<IQQQH")
    if len(data) < 8 + head:
        raise DataError("truncated header")
    version, n, d, c, nlen = struct.unpack_from("<IQQQH", data, 8)
    if version != DATA_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    pos = 8 + head
    if len(data) != pos + nlen + 8 * n * d + 8 * n:
        raise DataError("size does not match header")
    name = data[pos : pos + nlen].decode()
    pos += nlen
    x = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    y = np.frombuffer(data, dtype="<i8", count=n, offset=pos).astype(np.int64)
    return Dataset(x, y, int(c), name)
