"""Comparison systems: homogeneous FedAdam (AllLarge / AllSmall / ExclusiveFL),
per-client Local training, and HeteroFL width cropping."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .fed import (
    ClientSpec,
    FedAdamConfig,
    LocalConfig,
    RoundPlan,
    RoundResult,
    ServerOptState,
    TierTopology,
    fedadam_step,
    homomorphic_average,
    local_update,
    sample_round,
)
from .model import LayeredModel, Params, add, count_parameters
from .tensor import TAG_LOCAL, Rng

BASELINES = ("alllarge", "allsmall", "exclusivefl", "local", "heterofl")


class HomogeneousServer:
    """Plain FedAdam over one architecture.

    Sampling and client streams are drawn exactly as in ``InclusiveServer`` so
    runs line up round for round. ``participants`` restricts which tiers'
    clients contribute (ExclusiveFL keeps only the strongest).
    """

    def __init__(
        self,
        model: LayeredModel,
        clients: list[ClientSpec],
        datasets: list,
        local: LocalConfig,
        fedadam: FedAdamConfig,
        rng: Rng,
        sample_fraction: float = 1.0,
        participants=None,
        n_tiers: int | None = None,
    ):
        self.model = model
        self.clients = clients
        self.by_id = {c.client_id: c for c in clients}
        self.datasets = datasets
        self.local = local
        self.rng = rng
        self.sample_fraction = sample_fraction
        self.participants = None if participants is None else set(participants)
        self.n_tiers = n_tiers if n_tiers is not None else max(c.tier for c in clients) + 1
        self.opt = ServerOptState.zeros(model.params, fedadam)

    def run_round(self, t: int) -> RoundResult:
        plan = sample_round(self.clients, self.sample_fraction, self.rng, t, self.n_tiers)
        ids = [cid for cid in plan.sampled if self.participants is None or self.by_id[cid].tier in self.participants]
        outs = []
        for cid in ids:
            c = self.by_id[cid]
            ds = self.datasets[c.dataset]
            outs.append(local_update(self.model, ds.inputs[c.train], ds.labels[c.train], self.local, self.rng.child(TAG_LOCAL, t, cid)))
        tier = self.model.tier
        if not outs:
            return RoundResult(t, {tier: 0}, {tier: float("nan")})
        g = homomorphic_average([d for d, _ in outs])
        self.model = self.model.with_params(fedadam_step(self.opt, g, self.model.params))
        return RoundResult(t, {tier: len(outs)}, {tier: float(np.mean([l for _, l in outs]))})

    def eval_models(self) -> dict[int, LayeredModel]:
        return {self.model.tier: self.model}

    @property
    def global_tier(self) -> int:
        return self.model.tier


class LocalTrainer:
    """Each client trains its own copy with no communication.

    Per-tier reporting uses the first client of each tier (one client per
    tier in the cross-silo setting).
    """

    def __init__(self, models: dict[int, LayeredModel], clients: list[ClientSpec], datasets: list, local: LocalConfig, rng: Rng):
        self.clients = clients
        self.datasets = datasets
        self.local = local
        self.rng = rng
        self.models = {c.client_id: models[c.tier].copy() for c in clients}
        self.tier_of = {c.client_id: c.tier for c in clients}

    def run_round(self, t: int) -> RoundResult:
        losses: dict[int, list[float]] = {}
        for c in sorted(self.clients, key=lambda c: c.client_id):
            ds = self.datasets[c.dataset]
            m = self.models[c.client_id]
            delta, loss = local_update(m, ds.inputs[c.train], ds.labels[c.train], self.local, self.rng.child(TAG_LOCAL, t, c.client_id))
            self.models[c.client_id] = m.with_params(add(m.params, delta))
            losses.setdefault(c.tier, []).append(loss)
        counts = {j: len(v) for j, v in losses.items()}
        return RoundResult(t, counts, {j: float(np.mean(v)) for j, v in losses.items()})

    def eval_models(self) -> dict[int, LayeredModel]:
        out = {}
        for c in sorted(self.clients, key=lambda c: c.client_id):
            out.setdefault(c.tier, self.models[c.client_id])
        return dict(sorted(out.items()))

    @property
    def global_tier(self) -> int:
        return max(self.tier_of.values())


# -- HeteroFL ---------------------------------------------------------------


def heterofl_crop(w: np.ndarray, rows: int, cols: int | None = None) -> np.ndarray:
    """Top-left ``rows x cols`` block of a matrix, or the first ``rows`` entries of a vector."""
    if w.ndim == 1:
        if cols is not None and cols != 1 or not 0 < rows <= w.shape[0]:
            raise DimensionError(f"cannot crop vector of length {w.shape[0]} to {rows}")
        return w[:rows].copy()
    if cols is None or not (0 < rows <= w.shape[0] and 0 < cols <= w.shape[1]):
        raise DimensionError(f"cannot crop {w.shape} to ({rows}, {cols})")
    return w[:rows, :cols].copy()


def crop_params(params: Params, shapes: dict[str, tuple[int, ...]]) -> Params:
    out = {}
    for k, shape in shapes.items():
        w = params[k]
        out[k] = heterofl_crop(w, shape[0]) if w.ndim == 1 else heterofl_crop(w, shape[0], shape[1])
    return out


def sub_shapes(params: Params, width: int) -> dict[str, tuple[int, ...]]:
    """Shapes of a width-``width`` model cut from ``params``.

    Hidden dimensions shrink; the input dimension and the class count stay.
    """
    shapes = {}
    for k, v in params.items():
        if k == "head.proj.weight":
            shapes[k] = (v.shape[0], width)
        elif k == "head.cls.weight":
            shapes[k] = (width, v.shape[1])
        elif k == "head.cls.bias":
            shapes[k] = v.shape
        elif v.ndim == 2:
            shapes[k] = (width, width)
        else:
            shapes[k] = (width,)
    return shapes


def heterofl_aggregate(global_params: Params, local_params: list[Params]) -> Params:
    """Each global entry becomes the mean over local models whose crop covers it.

    Entries no local model covers keep their previous value. Locals are summed
    in the order given.
    """
    out = {}
    for k, g in global_params.items():
        total = np.zeros_like(g)
        cover = np.zeros(g.shape, dtype=np.int64)
        for p in local_params:
            w = p[k]
            if w.ndim != g.ndim or any(a > b for a, b in zip(w.shape, g.shape)):
                raise DimensionError(f"{k}: local shape {w.shape} is not a crop of {g.shape}")
            region = tuple(slice(0, s) for s in w.shape)
            total[region] += w
            cover[region] += 1
        new = g.copy()
        hit = cover > 0
        new[hit] = total[hit] / cover[hit]
        out[k] = new
    return out


def solve_widths(
    depths, width: int, input_dim: int, n_classes: int, projection: bool = True
) -> list[int]:
    """HeteroFL widths whose parameter counts track the depth-scaled tiers.

    Every HeteroFL model keeps the full depth; for each shallower tier pick the
    smallest width whose count reaches that tier's count. The deepest tier
    keeps the full width.
    """
    depths = list(depths)
    full = depths[-1]
    widths = []
    for depth in depths[:-1]:
        target = count_parameters(depth, width, input_dim, n_classes, projection)
        w = next(
            (w for w in range(1, width + 1) if count_parameters(full, w, input_dim, n_classes, projection) >= target),
            width,
        )
        widths.append(w)
    widths.append(width)
    return widths


class HeteroFLServer:
    """Full-depth global model; tier j clients train its top-left width-w_j crop.

    Aggregation is the coverage mean of the uploaded local models, the
    original HeteroFL protocol.
    """

    def __init__(
        self,
        global_model: LayeredModel,
        widths: list[int],
        clients: list[ClientSpec],
        datasets: list,
        local: LocalConfig,
        rng: Rng,
        sample_fraction: float = 1.0,
    ):
        if any(w > global_model.width for w in widths):
            raise ConfigError("HeteroFL widths cannot exceed the global width")
        self.model = global_model
        self.widths = list(widths)
        self.clients = clients
        self.by_id = {c.client_id: c for c in clients}
        self.datasets = datasets
        self.local = local
        self.rng = rng
        self.sample_fraction = sample_fraction

    def tier_model(self, tier: int) -> LayeredModel:
        shapes = sub_shapes(self.model.params, self.widths[tier])
        return LayeredModel(tier, self.model.depth, crop_params(self.model.params, shapes), self.model.activation, self.model.residual)

    def run_round(self, t: int) -> RoundResult:
        n_tiers = len(self.widths)
        plan: RoundPlan = sample_round(self.clients, self.sample_fraction, self.rng, t, n_tiers)
        locals_, losses = [], {}
        subs = {}
        for cid in plan.sampled:
            c = self.by_id[cid]
            sub = subs.setdefault(c.tier, self.tier_model(c.tier))
            ds = self.datasets[c.dataset]
            delta, loss = local_update(sub, ds.inputs[c.train], ds.labels[c.train], self.local, self.rng.child(TAG_LOCAL, t, cid))
            locals_.append(add(sub.params, delta))
            losses.setdefault(c.tier, []).append(loss)
        if locals_:
            self.model = self.model.with_params(heterofl_aggregate(self.model.params, locals_))
        return RoundResult(
            t,
            plan.counts,
            {j: float(np.mean(losses[j])) if j in losses else float("nan") for j in range(n_tiers)},
        )

    def eval_models(self) -> dict[int, LayeredModel]:
        return {j: self.tier_model(j) for j in range(len(self.widths))}

    @property
    def global_tier(self) -> int:
        return len(self.widths) - 1
