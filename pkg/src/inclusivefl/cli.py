"""Command line entry point: ``inclusivefl {run,sweep,gen-data,eval}``.

Every config key is also a flag (``--topology.depths 2,4,6``). Flags override
values from ``--config``, which overrides ``--preset``. Failures exit non-zero and print one JSON line
``{"error": <type>, "message": <text>}`` to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .data import load_dataset, make_synthetic, save_dataset
from .errors import InclusiveFLError
from .harness import synthetic_spec, run_experiment, sweep
from .metrics import evaluate
from .model import load_checkpoint
from .tensor import Rng


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS), help="start from a named setting")
    p.add_argument("--config", help="flat key = value config file")
    group = p.add_argument_group("config keys")
    for f in dataclasses.fields(config_mod.ExperimentConfig):
        key = f.metadata["key"]
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", help=f.metadata.get("help") or None)


def _config_from(args) -> config_mod.ExperimentConfig:
    base = config_mod.preset(args.preset) if args.preset else config_mod.ExperimentConfig()
    if args.config:
        base = config_mod.load(args.config, base)
    items = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return config_mod.from_items(items, base)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inclusivefl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment (or every seed in --seeds)")
    _add_config_flags(run)

    sw = sub.add_parser("sweep", help="run one experiment per parameter value")
    sw.add_argument("parameter", choices=["beta", "proportion"])
    sw.add_argument("--values", help="comma separated; proportions as 1:2:7")
    _add_config_flags(sw)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset file")
    gen.add_argument("path")
    _add_config_flags(gen)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    ev.add_argument("checkpoint")
    ev.add_argument("dataset")
    return parser


def _main(argv) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")

    if args.command == "run":
        cfg = _config_from(args)
        result = run_experiment(cfg)
        print(json.dumps(result["global"], sort_keys=True))
    elif args.command == "sweep":
        cfg = _config_from(args)
        values = None
        if args.values:
            values = [v.strip() for v in args.values.split(",")] if args.parameter == "beta" else args.values.split(",")
        rows = sweep(cfg, args.parameter, values)
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    elif args.command == "gen-data":
        cfg = _config_from(args)
        ds = make_synthetic(synthetic_spec(cfg), Rng(cfg.seed))
        Path(args.path).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, args.path)
        print(json.dumps({"path": args.path, "n": len(ds), "input_dim": ds.input_dim, "classes": ds.n_classes}))
    else:
        model = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.dataset)
        acc, f1 = evaluate(model, ds.inputs, ds.labels)
        print(json.dumps({"accuracy": acc, "macro_f1": f1, "n": len(ds)}, sort_keys=True))
    return 0


def main(argv=None) -> int:
    try:
        return _main(sys.argv[1:] if argv is None else argv)
    except (InclusiveFLError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
