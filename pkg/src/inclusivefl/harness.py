"""Build experiments from a config, run them, and write result files.

Files written by :func:`run_experiment` into the output directory:

``metrics.csv``
    ``round,tier,eval_accuracy,eval_macro_f1,train_loss``; one row per
    evaluated round and reported tier. Round 0 is the initial evaluation.
``summary.json``
    best metrics per tier, rounds-to-best, seed and the config echo.
``curves/tier-{j}.csv``
    the same rows split per tier, for plotting.
``checkpoints/tier-{j}.ckpt``
    final models in the checkpoint format of :mod:`inclusivefl.model`.
"""
from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .config import ExperimentConfig
from .data import Dataset, SyntheticSpec, iid_split, load_dataset, make_synthetic, silo_assign, train_eval_split
from .errors import ConfigError
from .fed import ClientSpec, FedAdamConfig, InclusiveServer, LocalConfig, TierTopology, assign_tiers
from .metrics import evaluate
from .model import build_tier_models, checkpoint_bytes
from .tensor import TAG_SPLIT, TAG_WARP, Rng

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "INCLUSIVEFL_OUTPUT_ROOT"
CSV_HEADER = "round,tier,eval_accuracy,eval_macro_f1,train_loss\n"
DEFAULT_BETA_SWEEP = (0.0, 0.2, 0.5, 0.8, 1.0)
DEFAULT_PROPORTION_SWEEP = ("1:1:1", "1:2:7", "7:2:1")


@dataclass
class MetricsRecord:
    round: int
    tier: int
    accuracy: float
    macro_f1: float
    train_loss: float


@dataclass
class Experiment:
    config: ExperimentConfig
    topology: TierTopology
    datasets: list[Dataset]
    clients: list[ClientSpec]
    eval_sets: dict[int, tuple[np.ndarray, np.ndarray]]
    server: object


@dataclass
class RunReport:
    config: ExperimentConfig
    records: list[MetricsRecord] = field(default_factory=list)
    global_tier: int = 0
    models: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def curve(self, tier: int) -> list[MetricsRecord]:
        return [r for r in self.records if r.tier == tier]

    def summary(self) -> dict:
        tiers = {}
        for j in sorted({r.tier for r in self.records}):
            tiers[str(j)] = tier_summary(self.curve(j))
        return {
            "method": self.config.method,
            "setting": self.config.setting,
            "seed": self.config.seed,
            "global": {"tier": self.global_tier, **tiers[str(self.global_tier)]},
            "tiers": tiers,
            "config": self.config.to_items(),
        }


def tier_summary(curve: list[MetricsRecord]) -> dict:
    accs = [r.accuracy for r in curve]
    best = max(accs)
    best_round = next(r.round for r in curve if r.accuracy == best)
    near = next(r.round for r in curve if r.accuracy >= 0.95 * best)
    return {
        "best_accuracy": best,
        "best_macro_f1": max(r.macro_f1 for r in curve),
        "rounds_to_best": best_round,
        "rounds_to_95pct_best": near,
        "final_accuracy": curve[-1].accuracy,
        "final_macro_f1": curve[-1].macro_f1,
    }


def topology_of(cfg: ExperimentConfig) -> TierTopology:
    return TierTopology.from_ratio(cfg.depths, cfg.proportions)


def synthetic_spec(cfg: ExperimentConfig, n=None, classes=None) -> SyntheticSpec:
    return SyntheticSpec(
        n=n or cfg.data_n,
        input_dim=cfg.data_input_dim,
        n_classes=classes or cfg.data_classes,
        spread=cfg.data_spread,
        noise=cfg.data_noise,
        warp_depth=cfg.data_warp_depth,
        clusters_per_class=cfg.data_clusters,
    )


def build_data(cfg: ExperimentConfig, topology: TierTopology, rng: Rng):
    """Datasets, clients and per-tier evaluation sets for either setting."""
    if cfg.setting == "cross-device":
        ds = load_dataset(cfg.data_file) if cfg.data_file else make_synthetic(synthetic_spec(cfg), rng)
        train, ev = train_eval_split(len(ds), 1.0 - cfg.eval_fraction, rng.child(TAG_SPLIT, 0))
        tiers = assign_tiers(cfg.clients, topology, rng)
        clients = [
            ClientSpec(i, int(tiers[i]), 0, train[p.indices])
            for i, p in enumerate(iid_split(len(train), cfg.clients, rng))
        ]
        x, y = ds.inputs[ev], ds.labels[ev]
        return [ds], clients, {j: (x, y) for j in range(topology.n_tiers)}

    n_silos = topology.n_tiers if not cfg.silo_mapping else len(cfg.silo_mapping)
    classes = cfg.silo_classes or (cfg.data_classes,) * n_silos
    sizes = cfg.silo_sizes or (cfg.data_n // n_silos,) * n_silos
    if len(classes) != n_silos or len(sizes) != n_silos:
        raise ConfigError(f"silo.classes and silo.sizes need {n_silos} entries")
    warp = rng.child(TAG_WARP)
    datasets = [
        make_synthetic(synthetic_spec(cfg, n, c), rng.child(100 + i), warp, name=f"silo-{i}")
        for i, (n, c) in enumerate(zip(sizes, classes))
    ]
    clients = silo_assign(datasets, topology, rng, mapping=list(cfg.silo_mapping) or None)
    eval_sets = {}
    for j in range(topology.n_tiers):
        mine = [c for c in clients if c.tier == j]
        if mine:
            eval_sets[j] = (
                np.concatenate([datasets[c.dataset].inputs[c.eval] for c in mine]),
                np.concatenate([datasets[c.dataset].labels[c.eval] for c in mine]),
            )
    return datasets, clients, eval_sets


def _class_counts(cfg, topology, datasets, clients):
    if cfg.setting == "cross-device":
        return [datasets[0].n_classes] * topology.n_tiers
    counts = []
    for j in range(topology.n_tiers):
        mine = [datasets[c.dataset].n_classes for c in clients if c.tier == j]
        counts.append(max(mine) if mine else max(d.n_classes for d in datasets))
    return counts


def build_experiment(cfg: ExperimentConfig, executor=None) -> Experiment:
    topology = topology_of(cfg)
    rng = Rng(cfg.seed)
    datasets, clients, eval_sets = build_data(cfg, topology, rng)
    d_in = datasets[0].input_dim
    local = LocalConfig(cfg.local_steps, cfg.batch_size, cfg.lr)
    adam = FedAdamConfig(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eta, cfg.adam_tau)
    classes = _class_counts(cfg, topology, datasets, clients)
    shared_c = max(classes)
    method = cfg.method

    if method.startswith("inclusivefl"):
        models = build_tier_models(topology.depths, d_in, cfg.width, classes, rng, cfg.activation, residual=bool(cfg.residual))
        server = InclusiveServer(
            topology, models, clients, datasets, local, adam, rng,
            sample_fraction=cfg.sample_fraction,
            beta=cfg.beta,
            distill=method != "inclusivefl-no-md",
            share_layers=method != "inclusivefl-star",
            excluded=cfg.exclude,
            executor=executor,
        )
    elif method in ("alllarge", "allsmall", "exclusivefl"):
        tier = 0 if method == "allsmall" else topology.largest
        model = build_tier_models([topology.depths[tier]], d_in, cfg.width, [shared_c], rng, cfg.activation, residual=bool(cfg.residual))[0]
        model.tier = tier
        participants = None
        if method == "exclusivefl":
            if not any(c.tier == topology.largest for c in clients):
                raise ConfigError("ExclusiveFL needs at least one client in the strongest tier")
            participants = {topology.largest}
        server = baselines.HomogeneousServer(
            model, clients, datasets, local, adam, rng,
            sample_fraction=cfg.sample_fraction, participants=participants, n_tiers=topology.n_tiers,
        )
    elif method == "local":
        models = build_tier_models(topology.depths, d_in, cfg.width, classes, rng, cfg.activation, residual=bool(cfg.residual))
        server = baselines.LocalTrainer({m.tier: m for m in models}, clients, datasets, local, rng)
    else:
        model = build_tier_models(
            [topology.depths[-1]], d_in, cfg.width, [shared_c], rng, cfg.activation, projection=True, residual=bool(cfg.residual)
        )[0]
        model.tier = topology.largest
        widths = baselines.solve_widths(topology.depths, cfg.width, d_in, shared_c)
        server = baselines.HeteroFLServer(model, widths, clients, datasets, local, rng, cfg.sample_fraction)
    return Experiment(cfg, topology, datasets, clients, eval_sets, server)


def _eval_models(exp: Experiment) -> dict:
    models = exp.server.eval_models()
    if exp.config.setting == "cross-silo" and len(models) == 1:
        # one shared model reported against every silo
        (m,) = models.values()
        models = {j: m for j in exp.eval_sets}
    return {j: m for j, m in sorted(models.items()) if j in exp.eval_sets}


def _evaluate_round(exp: Experiment, t: int, losses: dict) -> list[MetricsRecord]:
    out = []
    for j, m in _eval_models(exp).items():
        x, y = exp.eval_sets[j]
        acc, f1 = evaluate(m, x, y)
        out.append(MetricsRecord(t, j, acc, f1, float(losses.get(j, float("nan")))))
    return out


def run_training(cfg: ExperimentConfig) -> RunReport:
    """Run T rounds of the configured method, evaluating every ``eval_interval`` rounds."""
    start = time.perf_counter()
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    try:
        exp = build_experiment(cfg, executor)
        report = RunReport(cfg, global_tier=exp.server.global_tier)
        report.records.extend(_evaluate_round(exp, 0, {}))
        for t in range(1, cfg.rounds + 1):
            res = exp.server.run_round(t)
            if t % cfg.eval_interval == 0 or t == cfg.rounds:
                report.records.extend(_evaluate_round(exp, t, res.losses))
                log.debug("round %d: %s", t, [(r.tier, r.accuracy) for r in report.records[-3:]])
        report.models = _eval_models(exp)
    finally:
        if executor is not None:
            executor.shutdown()
    report.wall_clock = time.perf_counter() - start
    return report


def run_baseline(kind: str, cfg: ExperimentConfig) -> RunReport:
    if kind.lower() not in baselines.BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}")
    return run_training(cfg.replace(method=kind.lower()))


# -- file emission ----------------------------------------------------------


def _num(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def metrics_csv(records: list[MetricsRecord]) -> str:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(f"{r.round},{r.tier},{_num(r.accuracy)},{_num(r.macro_f1)},{_num(r.train_loss)}\n")
    return "".join(lines)


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def resolve_output(cfg: ExperimentConfig) -> Path:
    if cfg.output:
        return Path(cfg.output)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / f"{cfg.method}-seed{cfg.seed}"


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc
    return path


def write_report(report: RunReport, out: Path) -> dict:
    (out / "curves").mkdir(exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(report.records))
    summary = report.summary()
    (out / "summary.json").write_text(summary_json(summary))
    for j in sorted({r.tier for r in report.records}):
        (out / "curves" / f"tier-{j}.csv").write_text(metrics_csv(report.curve(j)))
    for j, m in report.models.items():
        (out / "checkpoints" / f"tier-{j}.ckpt").write_bytes(checkpoint_bytes(m))
    return summary


def aggregate_summaries(summaries: list[dict]) -> dict:
    keys = ("best_accuracy", "best_macro_f1", "final_accuracy", "rounds_to_best", "rounds_to_95pct_best")
    out = {"seeds": [s["seed"] for s in summaries], "global": {}}
    for k in keys:
        vals = [float(s["global"][k]) for s in summaries]
        out["global"][k] = {
            "mean": statistics.fmean(vals),
            "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
            "median": statistics.median(vals),
        }
    return out


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    """Run one config (or every seed in ``cfg.seeds``) and write its files.

    Returns the summary dict, or in multi-seed mode the aggregate with the
    per-seed summaries under ``"runs"``.
    """
    out = _prepare_dir(Path(out) if out is not None else resolve_output(cfg))
    if not cfg.seeds:
        report = run_training(cfg)
        log.info("%s seed %d done in %.1fs", cfg.method, cfg.seed, report.wall_clock)
        return write_report(report, out)
    summaries = []
    for seed in cfg.seeds:
        sub = _prepare_dir(out / f"seed-{seed}")
        one = cfg.replace(seed=seed, seeds=())
        summaries.append(write_report(run_training(one), sub))
    agg = aggregate_summaries(summaries)
    (out / "aggregate.json").write_text(summary_json(agg))
    return {**agg, "runs": summaries}


def sweep(cfg: ExperimentConfig, parameter: str, values=None, out: Path | None = None) -> list[dict]:
    """One experiment per value with a shared seed schedule; writes ``sweep.csv``."""
    if parameter not in ("beta", "proportion"):
        raise ConfigError(f"cannot sweep {parameter!r}; choose beta or proportion")
    if values is None:
        values = DEFAULT_BETA_SWEEP if parameter == "beta" else DEFAULT_PROPORTION_SWEEP
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = _prepare_dir(Path(out) if out is not None else resolve_output(cfg).with_name(f"sweep-{parameter}"))
    rows = []
    for v in values:
        if parameter == "beta":
            one = cfg.replace(beta=float(v))
            label = repr(float(v))
        else:
            ratio = tuple(float(x) for x in str(v).replace(",", ":").split(":"))
            one = cfg.replace(proportions=ratio)
            label = ":".join(f"{x:g}" for x in ratio)
        res = run_experiment(one, out / f"{parameter}={label}")
        g = res["global"]
        if cfg.seeds:
            g = {k: g[k]["mean"] for k in g}
        rows.append({"value": label, **{k: g[k] for k in ("best_accuracy", "final_accuracy", "rounds_to_best", "rounds_to_95pct_best")}})
    lines = ["value,best_accuracy,final_accuracy,rounds_to_best,rounds_to_95pct_best\n"]
    for r in rows:
        lines.append(f"{r['value']},{_num(r['best_accuracy'])},{_num(r['final_accuracy'])},{r['rounds_to_best']},{r['rounds_to_95pct_best']}\n")
    (out / "sweep.csv").write_text("".join(lines))
    return rows
