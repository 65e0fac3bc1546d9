"""Deterministic simulator for federated learning over depth-heterogeneous device tiers.

InclusiveFL trains one sub-global model per device tier, with deeper models
for stronger devices, and lets the tiers share their common bottom layers. A
momentum term passes knowledge from larger to smaller models. The package
also ships the comparison baselines and a reproducible experiment harness.
"""
from .errors import ConfigError, DataError, DimensionError, NumericError, TopologyError
from .fed import InclusiveServer, TierTopology
from .kernels import BACKEND
from .model import LayeredModel, build_tier_models

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DataError",
    "DimensionError",
    "InclusiveServer",
    "LayeredModel",
    "NumericError",
    "TierTopology",
    "TopologyError",
    "build_tier_models",
]
