"""Experiment configuration as flat ``dotted.key = value`` text.

Example::

    method = inclusivefl
    topology.depths = 2,4,6
    topology.proportions = 1:1:1
    rounds = 200
    # comments and blank lines are ignored
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError

METHODS = (
    "inclusivefl",
    "inclusivefl-no-md",
    "inclusivefl-star",
    "alllarge",
    "allsmall",
    "exclusivefl",
    "local",
    "heterofl",
)
SETTINGS = ("cross-device", "cross-silo")


def _key(name: str, help: str = ""):
    return {"key": name, "help": help}


@dataclass
class ExperimentConfig:
    method: str = field(default="inclusivefl", metadata=_key("method", "|".join(METHODS)))
    setting: str = field(default="cross-device", metadata=_key("setting", "cross-device or cross-silo"))
    seed: int = field(default=1, metadata=_key("seed"))
    seeds: tuple[int, ...] = field(default=(), metadata=_key("seeds", "multi-seed mode, e.g. 1,2,3,4,5"))
    depths: tuple[int, ...] = field(default=(2, 4, 6), metadata=_key("topology.depths"))
    proportions: tuple[float, ...] = field(default=(1.0, 1.0, 1.0), metadata=_key("topology.proportions", "ratio such as 1:2:7"))
    clients: int = field(default=30, metadata=_key("clients"))
    rounds: int = field(default=50, metadata=_key("rounds"))
    sample_fraction: float = field(default=0.2, metadata=_key("sample.fraction"))
    local_steps: int = field(default=5, metadata=_key("local.steps"))
    batch_size: int = field(default=64, metadata=_key("local.batch_size"))
    lr: float = field(default=0.05, metadata=_key("local.lr"))
    beta: float = field(default=0.2, metadata=_key("beta", "momentum distillation factor"))
    adam_beta1: float = field(default=0.9, metadata=_key("fedadam.beta1"))
    adam_beta2: float = field(default=0.999, metadata=_key("fedadam.beta2"))
    adam_eta: float = field(default=0.01, metadata=_key("fedadam.eta"))
    adam_tau: float = field(default=1e-8, metadata=_key("fedadam.tau"))
    width: int = field(default=16, metadata=_key("model.width"))
    activation: str = field(default="tanh", metadata=_key("model.activation"))
    residual: int = field(default=0, metadata=_key("model.residual", "1 adds a skip connection around each encoder layer"))
    data_n: int = field(default=3000, metadata=_key("data.n"))
    data_input_dim: int = field(default=10, metadata=_key("data.input_dim"))
    data_classes: int = field(default=4, metadata=_key("data.classes"))
    data_spread: float = field(default=1.0, metadata=_key("data.spread"))
    data_noise: float = field(default=0.0, metadata=_key("data.noise"))
    data_warp_depth: int = field(default=2, metadata=_key("data.warp_depth"))
    data_clusters: int = field(default=1, metadata=_key("data.clusters_per_class"))
    data_file: str = field(default="", metadata=_key("data.file", "dataset file (cross-device only)"))
    eval_fraction: float = field(default=0.2, metadata=_key("data.eval_fraction"))
    silo_classes: tuple[int, ...] = field(default=(), metadata=_key("silo.classes", "class count per silo"))
    silo_sizes: tuple[int, ...] = field(default=(), metadata=_key("silo.sizes", "sample count per silo"))
    silo_mapping: tuple[int, ...] = field(default=(), metadata=_key("silo.mapping", "tier of each silo"))
    exclude: tuple[int, ...] = field(default=(), metadata=_key("exclude", "tier indices dropped from training"))
    eval_interval: int = field(default=1, metadata=_key("eval_interval"))
    workers: int = field(default=0, metadata=_key("workers", "threads for client updates; 0 = serial"))
    output: str = field(default="", metadata=_key("output"))

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if len(self.proportions) != len(self.depths):
            raise ConfigError("topology.proportions needs one entry per depth")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample.fraction must lie in (0, 1]")
        if not 0 <= self.beta <= 1:
            raise ConfigError("beta must lie in [0, 1]")
        if self.rounds < 0 or self.local_steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("rounds/steps must be non-negative, batch size positive, lr non-negative")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be at least 1")
        if any(not 0 <= j < len(self.depths) for j in self.exclude):
            raise ConfigError(f"exclude refers to unknown tiers: {self.exclude}")
        if self.exclude and not self.method.startswith("inclusivefl"):
            raise ConfigError("tier exclusion only applies to InclusiveFL methods")
        if len(set(self.exclude)) >= len(self.depths):
            raise ConfigError("cannot exclude every tier")
        if self.setting == "cross-silo" and self.data_file:
            raise ConfigError("data.file is only supported in the cross-device setting")
        if self.seeds and len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_items(self) -> dict[str, object]:
        return {f.metadata["key"]: _format(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_items().items())


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


FIELDS_BY_KEY = {f.metadata["key"]: f for f in dataclasses.fields(ExperimentConfig)}


def parse_value(key: str, raw: str):
    f = FIELDS_BY_KEY.get(key)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    typ = f.type if isinstance(f.type, str) else str(f.type)
    try:
        if typ.startswith("tuple[int"):
            return tuple(int(x) for x in raw.replace(":", ",").split(",") if x.strip())
        if typ.startswith("tuple[float"):
            return tuple(float(x) for x in raw.replace(":", ",").split(",") if x.strip())
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def from_items(items: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for k, raw in items.items():
        value = parse_value(k, raw)
        values[FIELDS_BY_KEY[k].name] = value
    base = base or ExperimentConfig()
    return dataclasses.replace(base, **values)


def parse_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        items[k.strip()] = v
    return from_items(items, base)


def load(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_text(fh.read(), base)


# Starting points for the two evaluation settings. "glue" mirrors the
# many-client text-classification runs, "ner" the three-silo medical runs.
PRESETS: dict[str, dict[str, str]] = {
    "glue": {
        "setting": "cross-device",
        "beta": "0.2",
        "clients": "1000",
        "sample.fraction": "0.02",
        "local.steps": "5",
        "local.batch_size": "64",
    },
    "ner": {
        "setting": "cross-silo",
        "beta": "0.5",
        "silo.classes": "3,5,7",
        "silo.sizes": "600,900,1500",
        "sample.fraction": "1.0",
        "local.steps": "5",
        "local.batch_size": "64",
    },
}


def preset(name: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_items(PRESETS[name], base)
