"""Layered dense models: a stack of uniform d x d encoder layers plus a tier-owned head.

Parameters live in a flat, ordered ``dict[str, ndarray]``:

* ``layer.{l}.weight`` (d x d) and ``layer.{l}.bias`` (d) for l = 1..depth
* ``head.proj.weight`` (d_in x d), ``head.proj.bias`` (d), only when the input
  needs projecting to width d
* ``head.pool.weight`` (d x d), ``head.pool.bias`` (d)
* ``head.cls.weight`` (d x c), ``head.cls.bias`` (c)

Updates and gradients (a "delta") use the same dict layout, so
aggregation code never needs to know which tensor is which.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, TopologyError
from .tensor import TAG_INIT, Rng, colsum, matmul, randn

Params = dict[str, np.ndarray]

ACTIVATIONS = ("tanh", "relu", "linear")


def layer_key(l: int, part: str) -> str:
    return f"layer.{l}.{part}"


@dataclass
class LayeredModel:
    tier: int
    depth: int
    params: Params
    activation: str = "tanh"
    residual: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.params["head.pool.weight"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.params["head.cls.bias"].shape[0]

    @property
    def has_projection(self) -> bool:
        return "head.proj.weight" in self.params

    @property
    def input_dim(self) -> int:
        if self.has_projection:
            return self.params["head.proj.weight"].shape[0]
        return self.width

    def layer(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[layer_key(l, "weight")], self.params[layer_key(l, "bias")]

    def with_params(self, params: Params) -> "LayeredModel":
        return LayeredModel(self.tier, self.depth, params, self.activation, self.residual, dict(self.meta))

    def copy(self) -> "LayeredModel":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def count_parameters(depth: int, width: int, input_dim: int, n_classes: int, projection: bool) -> int:
    n = depth * (width * width + width) + width * width + width + width * n_classes + n_classes
    if projection:
        n += input_dim * width + width
    return n


# -- delta arithmetic -------------------------------------------------------


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check_structure(a: Params, b: Params):
    if a.keys() != b.keys():
        raise DimensionError(f"parameter sets differ: {sorted(set(a) ^ set(b))}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise DimensionError(f"{k}: shape mismatch {a[k].shape} vs {b[k].shape}")


def subtract(a: Params, b: Params) -> Params:
    _check_structure(a, b)
    return {k: a[k] - b[k] for k in a}


def add(a: Params, b: Params) -> Params:
    _check_structure(a, b)
    return {k: a[k] + b[k] for k in a}


def scale(a: Params, alpha: float) -> Params:
    return {k: alpha * v for k, v in a.items()}


def params_equal(a: Params, b: Params) -> bool:
    """Bitwise equality, so -0.0 and 0.0 count as different."""
    if a.keys() != b.keys():
        return False
    return all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


# -- construction -----------------------------------------------------------


def init_head(
    width: int, input_dim: int, n_classes: int, rng: Rng, projection: bool
) -> Params:
    if n_classes < 2:
        raise DataError(f"need at least 2 classes, got {n_classes}")
    head: Params = {}
    if projection:
        head["head.proj.weight"] = randn((input_dim, width), 1.0 / np.sqrt(input_dim), rng)
        head["head.proj.bias"] = randn(width, 0.01, rng)
    head["head.pool.weight"] = randn((width, width), 1.0 / np.sqrt(width), rng)
    head["head.pool.bias"] = randn(width, 0.01, rng)
    head["head.cls.weight"] = randn((width, n_classes), 1.0 / np.sqrt(width), rng)
    head["head.cls.bias"] = randn(n_classes, 0.01, rng)
    return head


def init_encoder(depth: int, width: int, rng: Rng) -> Params:
    enc: Params = {}
    for l in range(1, depth + 1):
        enc[layer_key(l, "weight")] = randn((width, width), 1.0 / np.sqrt(width), rng)
        enc[layer_key(l, "bias")] = randn(width, 0.01, rng)
    return enc


def build_tier_models(
    depths,
    input_dim: int,
    width: int,
    class_counts,
    rng: Rng,
    activation: str = "tanh",
    projection: bool | None = None,
    residual: bool = False,
) -> list[LayeredModel]:
    """One model per tier; shallower tiers copy the bottom layers of the deepest.

    The deepest encoder stack is drawn once. Heads are drawn per tier from a
    stream keyed by the tier's depth, so a single-tier build of depth L gets
    the same parameters as the depth-L tier of a multi-tier build.
    """
    depths = [int(x) for x in depths]
    if not depths or any(b <= a for a, b in zip(depths, depths[1:])):
        raise TopologyError(f"depths must be strictly increasing, got {depths}")
    if depths[0] < 1 or width < 1 or input_dim < 1:
        raise TopologyError("depth, width and input dimension must be positive")
    if isinstance(class_counts, int):
        class_counts = [class_counts] * len(depths)
    if len(class_counts) != len(depths):
        raise TopologyError("one class count per tier required")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if projection is None:
        projection = input_dim != width

    encoder = init_encoder(depths[-1], width, rng.child(TAG_INIT, 0))
    models = []
    for tier, (depth, c) in enumerate(zip(depths, class_counts)):
        params = {}
        for l in range(1, depth + 1):
            for part in ("weight", "bias"):
                params[layer_key(l, part)] = encoder[layer_key(l, part)].copy()
        params.update(init_head(width, input_dim, int(c), rng.child(TAG_INIT, 1, depth), projection))
        models.append(LayeredModel(tier, depth, params, activation, residual))
    return models


# -- forward / backward -----------------------------------------------------


def _act(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(out: np.ndarray, z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - out * out
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    # (input, pre-activation, output) for every encoder layer, then the pooler
    layers: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    pool: tuple[np.ndarray, np.ndarray, np.ndarray]


def forward(model: LayeredModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError(f"forward: expected a non-empty batch matrix, got shape {x.shape}")
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"forward: input dim {x.shape[1]} != model input dim {model.input_dim}")
    p = model.params
    act = model.activation
    h = x
    if model.has_projection:
        h = matmul(x, p["head.proj.weight"]) + p["head.proj.bias"]
    layers = []
    for l in range(1, model.depth + 1):
        w, b = model.layer(l)
        z = matmul(h, w) + b
        out = _act(z, act)
        layers.append((h, z, out))
        h = h + out if model.residual else out
    z = matmul(h, p["head.pool.weight"]) + p["head.pool.bias"]
    pooled = _act(z, act)
    pool = (h, z, pooled)
    logits = matmul(pooled, p["head.cls.weight"]) + p["head.cls.bias"]
    return logits, ForwardCache(x, layers, pool)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DataError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    sums = expd.sum(axis=1)
    rows = np.arange(b)
    loss = float(np.mean(np.log(sums) - shifted[rows, labels]))
    grad = expd / sums[:, None]
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def loss_and_backward(
    model: LayeredModel, cache: ForwardCache, logits: np.ndarray, labels
) -> tuple[float, Params]:
    loss, dlogits = cross_entropy(logits, labels)
    p = model.params
    act = model.activation
    grads: Params = {}

    h_pool, z_pool, pooled = cache.pool
    grads["head.cls.weight"] = matmul(pooled.T, dlogits)
    grads["head.cls.bias"] = colsum(dlogits)
    dz = matmul(dlogits, p["head.cls.weight"].T) * _act_grad(pooled, z_pool, act)
    grads["head.pool.weight"] = matmul(h_pool.T, dz)
    grads["head.pool.bias"] = colsum(dz)
    dh = matmul(dz, p["head.pool.weight"].T)

    for l in range(model.depth, 0, -1):
        h_in, z, out = cache.layers[l - 1]
        dz = dh * _act_grad(out, z, act)
        grads[layer_key(l, "weight")] = matmul(h_in.T, dz)
        grads[layer_key(l, "bias")] = colsum(dz)
        if model.residual:
            dh = dh + matmul(dz, model.layer(l)[0].T)
        else:
            dh = matmul(dz, model.layer(l)[0].T)

    if model.has_projection:
        grads["head.proj.weight"] = matmul(cache.inputs.T, dh)
        grads["head.proj.bias"] = colsum(dh)
    return loss, {k: grads[k] for k in p}


def loss_only(model: LayeredModel, x: np.ndarray, labels) -> float:
    logits, _ = forward(model, x)
    return cross_entropy(logits, labels)[0]


def sgd_step(model: LayeredModel, grads: Params, lr: float) -> LayeredModel:
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _check_structure(model.params, grads)
    return model.with_params({k: v - lr * grads[k] for k, v in model.params.items()})


def predict(model: LayeredModel, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)


# -- checkpoints ------------------------------------------------------------
#
# Layout, all integers little-endian:
#   magic   b"IFLCKPT\0"                  8 bytes
#   version u32 (= 1)
#   meta    u32 length + UTF-8 JSON with sorted keys (tier, depth, activation, residual)
#   count   u32 number of tensors
#   per tensor, in model order:
#     u16 name length, UTF-8 name
#     u8 ndim, ndim x u64 dims
#     prod(dims) x float64 little-endian, row-major

CKPT_MAGIC = b"IFLCKPT\0"
CKPT_VERSION = 1


def checkpoint_bytes(model: LayeredModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta = json.dumps(
        {"tier": model.tier, "depth": model.depth, "activation": model.activation, "residual": model.residual},
        sort_keys=True,
    ).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: LayeredModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> LayeredModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> LayeredModel:
    try:
        return _parse_checkpoint(data)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(data: bytes) -> LayeredModel:
    view = memoryview(data)
    if bytes(view[:8]) != CKPT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", view, pos)
    pos += 4
    meta = json.loads(bytes(view[pos : pos + mlen]))
    pos += mlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params: Params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        n = int(np.prod(shape))
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        params[name] = arr
    if pos != len(data):
        raise DataError("trailing bytes after checkpoint payload")
    return LayeredModel(meta["tier"], meta["depth"], params, meta["activation"], bool(meta.get("residual", False)))
