"""Server-side state machine for depth-heterogeneous federated training.

One round:

1. sample a fraction of clients and group them by tier
2. every sampled client runs local SGD from its tier's sub-global model and
   uploads ``w_after - w_before``
3. per tier, the uploads are averaged uniformly
4. a smaller tier's top encoder layer update is blended with the momentum
   bank entry of the next larger tier (previous round's value)
5. each tier applies FedAdam to its own sub-global model
6. the momentum bank is refreshed from this round's tier means
7. encoder layers below each tier's top layer are averaged across tiers,
   weighted by this round's sampled client counts, and copied back down

Tiers are indexed 0 (shallowest) .. n-1 (deepest).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, TopologyError
from .model import (
    LayeredModel,
    Params,
    forward,
    layer_key,
    loss_and_backward,
    sgd_step,
    subtract,
    zeros_like,
)
from .tensor import TAG_ASSIGN, TAG_LOCAL, TAG_SAMPLE, Rng


@dataclass(frozen=True)
class TierTopology:
    depths: tuple[int, ...]
    proportions: tuple[float, ...]

    def __post_init__(self):
        depths = tuple(int(d) for d in self.depths)
        props = tuple(float(p) for p in self.proportions)
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "proportions", props)
        if not depths:
            raise TopologyError("topology needs at least one tier")
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise TopologyError(f"tier depths must be strictly increasing, got {depths}")
        if len(depths) > 1 and depths[0] < 2:
            raise TopologyError("smallest depth must be at least 2 when tiers share layers")
        if depths[0] < 1:
            raise TopologyError("depths must be positive")
        if len(props) != len(depths):
            raise TopologyError("one proportion per tier required")
        if any(p < 0 for p in props) or not math.isclose(sum(props), 1.0, abs_tol=1e-9):
            raise TopologyError(f"proportions must be non-negative and sum to 1, got {props}")

    @classmethod
    def from_ratio(cls, depths, ratio) -> "TierTopology":
        total = float(sum(ratio))
        if total <= 0:
            raise TopologyError("ratio must have a positive total")
        return cls(tuple(depths), tuple(r / total for r in ratio))

    @property
    def n_tiers(self) -> int:
        return len(self.depths)

    @property
    def largest(self) -> int:
        return len(self.depths) - 1


@dataclass
class ClientSpec:
    client_id: int
    tier: int
    dataset: int
    train: np.ndarray
    eval: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_samples(self) -> int:
        return len(self.train)


def assign_tiers(n_clients: int, topology: TierTopology, rng: Rng) -> np.ndarray:
    """Draw each client's tier independently with the topology's proportions."""
    if topology.n_tiers == 1:
        return np.zeros(n_clients, dtype=np.int64)
    return rng.child(TAG_ASSIGN).choice(
        topology.n_tiers, size=n_clients, replace=True, p=np.asarray(topology.proportions)
    ).astype(np.int64)


@dataclass
class RoundPlan:
    t: int
    sampled: list[int]
    groups: dict[int, list[int]]

    @property
    def counts(self) -> dict[int, int]:
        return {j: len(ids) for j, ids in self.groups.items()}


def sample_round(clients: list[ClientSpec], fraction: float, rng: Rng, t: int, n_tiers: int | None = None) -> RoundPlan:
    """Uniformly sample ``ceil(fraction * K)`` distinct clients and group them by tier."""
    if not clients:
        raise ConfigError("cannot sample from an empty client pool")
    if not 0 < fraction <= 1:
        raise ConfigError(f"sample fraction must be in (0, 1], got {fraction}")
    k = len(clients)
    m = min(k, max(1, math.ceil(fraction * k - 1e-9)))
    order = rng.child(TAG_SAMPLE, t).permutation(k)[:m]
    picked = sorted(clients[i].client_id for i in order)
    by_id = {c.client_id: c for c in clients}
    if n_tiers is None:
        n_tiers = max(c.tier for c in clients) + 1
    groups: dict[int, list[int]] = {j: [] for j in range(n_tiers)}
    for cid in picked:
        groups[by_id[cid].tier].append(cid)
    return RoundPlan(t, picked, groups)


@dataclass
class LocalConfig:
    steps: int = 5
    batch_size: int = 64
    lr: float = 0.05


def draw_batch(n: int, batch_size: int, rng: Rng) -> np.ndarray:
    # with replacement only when the partition is smaller than the batch
    if batch_size > n:
        return rng.integers(0, n, size=batch_size)
    return rng.choice(n, size=batch_size, replace=False)


def local_update(
    model: LayeredModel, x: np.ndarray, y: np.ndarray, cfg: LocalConfig, rng: Rng
) -> tuple[Params, float]:
    """Run ``cfg.steps`` mini-batch SGD steps; return (w_after - w_before, mean loss)."""
    if len(y) == 0:
        raise ConfigError("local update needs a non-empty partition")
    work = model
    losses = []
    for _ in range(cfg.steps):
        idx = draw_batch(len(y), cfg.batch_size, rng)
        logits, cache = forward(work, x[idx])
        loss, grads = loss_and_backward(work, cache, logits, y[idx])
        losses.append(loss)
        work = sgd_step(work, grads, cfg.lr)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return subtract(work.params, model.params), mean_loss


def homomorphic_average(deltas: list[Params]) -> Params | None:
    """Unweighted mean of the deltas, summed in the order given; None for an empty group."""
    if not deltas:
        return None
    acc = {k: v.copy() for k, v in deltas[0].items()}
    for d in deltas[1:]:
        if d.keys() != acc.keys():
            raise DimensionError("deltas in one group must share a structure")
        for k in acc:
            acc[k] += d[k]
    n = len(deltas)
    return {k: v / n for k, v in acc.items()}


def distill_momentum(g: Params, momentum: dict[str, np.ndarray], beta: float, top: int) -> Params:
    """Blend the top encoder layer of ``g`` with a larger tier's momentum.

    Only ``layer.{top}.*`` changes; every other entry is passed through as the
    same array object.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    out = dict(g)
    for part in ("weight", "bias"):
        key = layer_key(top, part)
        if momentum[part].shape != g[key].shape:
            raise DimensionError(f"momentum {part} shape {momentum[part].shape} != {g[key].shape}")
        out[key] = beta * momentum[part] + (1.0 - beta) * g[key]
    return out


def compute_layer_momentum(g: Params, lower: int, top: int) -> dict[str, np.ndarray]:
    """Mean of encoder-layer slices ``lower..top`` inclusive."""
    if lower >= top:
        raise TopologyError(f"momentum range needs lower < top, got {lower}..{top}")
    out = {}
    for part in ("weight", "bias"):
        acc = g[layer_key(lower, part)].copy()
        for l in range(lower + 1, top + 1):
            acc += g[layer_key(l, part)]
        out[part] = acc / (top - lower + 1)
    return out


@dataclass
class FedAdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eta: float = 0.01
    tau: float = 1e-8


@dataclass
class ServerOptState:
    cfg: FedAdamConfig
    m: Params
    v: Params

    @classmethod
    def zeros(cls, params: Params, cfg: FedAdamConfig) -> "ServerOptState":
        if cfg.tau <= 0:
            raise ConfigError("FedAdam tau must be positive")
        return cls(cfg, zeros_like(params), zeros_like(params))


def fedadam_step(state: ServerOptState, g: Params, w: Params) -> Params:
    """Adam-style server update; ``g`` is an ascent direction (a model delta)."""
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            bad = int(np.size(v) - np.count_nonzero(np.isfinite(v)))
            raise NumericError(f"non-finite aggregated update in {k} ({bad} entries)")
    if g.keys() != w.keys():
        raise DimensionError("update and model parameter sets differ")
    c = state.cfg
    new_w = {}
    for k in w:
        m = c.beta1 * state.m[k] + (1.0 - c.beta1) * g[k]
        v = c.beta2 * state.v[k] + (1.0 - c.beta2) * (g[k] * g[k])
        state.m[k] = m
        state.v[k] = v
        new_w[k] = w[k] + c.eta * m / (np.sqrt(v) + c.tau)
    return new_w


def heterogeneous_aggregate(
    params: list[Params], counts, depths
) -> list[Params]:
    """Layer-wise cross-tier averaging followed by prefix rebuild.

    Layer ``l`` of the deepest tier becomes the count-weighted mean over tiers
    ``j`` with ``l <= depth_j - 1`` and a non-zero count. Every smaller tier then
    takes layers ``1..depth_j - 1`` from the deepest tier and keeps its own top
    layer and head. Returns new parameter dicts; inputs are not modified.
    """
    depths = [int(d) for d in depths]
    counts = [int(n) for n in counts]
    if not (len(params) == len(counts) == len(depths)):
        raise TopologyError("need one parameter set, count and depth per tier")
    out = [dict(p) for p in params]
    if sum(counts) == 0:
        return out
    big = len(depths) - 1
    for l in range(1, depths[big]):
        members = [j for j in range(len(depths)) if l <= depths[j] - 1 and counts[j] > 0]
        if not members:
            continue
        total = sum(counts[j] for j in members)
        for part in ("weight", "bias"):
            key = layer_key(l, part)
            first = members[0]
            acc = (counts[first] / total) * params[first][key]
            for j in members[1:]:
                acc = acc + (counts[j] / total) * params[j][key]
            out[big][key] = acc
    for j in range(big):
        for l in range(1, depths[j]):
            for part in ("weight", "bias"):
                key = layer_key(l, part)
                out[j][key] = out[big][key].copy()
    return out


@dataclass
class RoundResult:
    t: int
    counts: dict[int, int]
    losses: dict[int, float]
    group_means: dict[int, Params] = field(default_factory=dict)
    distilled: dict[int, Params] = field(default_factory=dict)


class InclusiveServer:
    """Holds the per-tier sub-global models, optimizer states and momentum bank.

    ``distill=False`` skips the momentum blend (the w/o-MD variant);
    ``share_layers=False`` skips cross-tier layer averaging (momentum-only
    variant). ``excluded`` removes every client of the listed tiers. An
    optional ``executor`` runs the client updates of a tier concurrently.
    """

    def __init__(
        self,
        topology: TierTopology,
        models: list[LayeredModel],
        clients: list[ClientSpec],
        datasets: list,
        local: LocalConfig,
        fedadam: FedAdamConfig,
        rng: Rng,
        sample_fraction: float = 1.0,
        beta: float = 0.2,
        distill: bool = True,
        share_layers: bool = True,
        excluded=(),
        keep_history: bool = False,
        executor=None,
    ):
        if len(models) != topology.n_tiers:
            raise TopologyError("one model per tier required")
        if not 0.0 <= beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {beta}")
        self.topology = topology
        self.models = models
        self.excluded = set(int(j) for j in excluded)
        self.clients = [c for c in clients if c.tier not in self.excluded]
        self.by_id = {c.client_id: c for c in self.clients}
        self.datasets = datasets
        self.local = local
        self.rng = rng
        self.sample_fraction = sample_fraction
        self.beta = beta
        self.distill = distill
        self.share_layers = share_layers
        self.keep_history = keep_history
        self.executor = executor
        self.opt = [ServerOptState.zeros(m.params, fedadam) for m in models]
        self.bank: dict[int, dict[str, np.ndarray]] = {}
        width = models[0].width
        for j in range(1, topology.n_tiers):
            self.bank[j] = {"weight": np.zeros((width, width)), "bias": np.zeros(width)}

    def client_update(self, cid: int, t: int) -> tuple[Params, float]:
        c = self.by_id[cid]
        ds = self.datasets[c.dataset]
        x = ds.inputs[c.train]
        y = ds.labels[c.train]
        return local_update(self.models[c.tier], x, y, self.local, self.rng.child(TAG_LOCAL, t, cid))

    def run_round(self, t: int) -> RoundResult:
        topo = self.topology
        plan = sample_round(self.clients, self.sample_fraction, self.rng, t, topo.n_tiers)
        result = RoundResult(t, plan.counts, {})

        # local updates, reduced in ascending client id
        means: dict[int, Params] = {}
        for j in range(topo.n_tiers):
            ids = plan.groups.get(j, [])
            if not ids:
                result.losses[j] = float("nan")
                continue
            if self.executor is None:
                outs = [self.client_update(cid, t) for cid in ids]
            else:
                # map keeps input order, so the reduction order is unchanged
                outs = list(self.executor.map(lambda cid: self.client_update(cid, t), ids))
            means[j] = homomorphic_average([d for d, _ in outs])
            result.losses[j] = float(np.mean([loss for _, loss in outs]))

        # blend with last round's bank before it is refreshed below
        distilled: dict[int, Params] = {}
        for j, g in means.items():
            if self.distill and j < topo.largest:
                g = distill_momentum(g, self.bank[j + 1], self.beta, topo.depths[j])
            distilled[j] = g

        for j, g in distilled.items():
            new_params = fedadam_step(self.opt[j], g, self.models[j].params)
            self.models[j] = self.models[j].with_params(new_params)

        for j, g in distilled.items():
            if j > 0:
                self.bank[j] = compute_layer_momentum(g, topo.depths[j - 1], topo.depths[j])

        if self.share_layers:
            counts = [plan.counts.get(j, 0) for j in range(topo.n_tiers)]
            merged = heterogeneous_aggregate([m.params for m in self.models], counts, topo.depths)
            self.models = [m.with_params(p) for m, p in zip(self.models, merged)]

        if self.keep_history:
            result.group_means = means
            result.distilled = distilled
        return result

    def eval_models(self) -> dict[int, LayeredModel]:
        return {j: m for j, m in enumerate(self.models)}

    @property
    def global_tier(self) -> int:
        return self.topology.largest
