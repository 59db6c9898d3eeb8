"""Command line entry point: ``dsdgp --dataset data.csv --layers 2 --out results.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import ExperimentConfig, run_experiment, write_results
from .errors import DSDGPError

# flag name -> config field; None defaults mean "not given on the command line"
FLAGS = {
    "dataset": str,
    "task": str,
    "layers": int,
    "inducing": int,
    "iterations": int,
    "minibatch": int,
    "lr": float,
    "folds": int,
    "seed": int,
    "samples_pred": int,
    "samples_train": int,
    "jobs": int,
}


class ConfigFileError(DSDGPError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsdgp", description="Train and evaluate (deep) sparse GP models over random splits.")
    p.add_argument("--config", help="JSON file with config fields; command line flags override it")
    for name, typ in FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--target-columns", type=lambda s: [int(v) for v in s.split(",")], default=None,
                   help="comma-separated target column indices (default: last column)")
    hdr = p.add_mutually_exclusive_group()
    hdr.add_argument("--header", dest="header", action="store_true", default=None)
    hdr.add_argument("--no-header", dest="header", action="store_false")
    p.add_argument("--out", required=True, help="path of the results JSON")
    p.add_argument("--artifacts", help="directory for per-fold checkpoints and loss traces (default: <out>.d)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigFileError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigFileError("config file must hold a JSON object")
    for name in [*FLAGS, "target_columns", "header"]:
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    return ExperimentConfig.from_mapping(doc)


def _error_doc(exc: BaseException) -> dict:
    err = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "line", "step"):
        if getattr(exc, attr, None) is not None:
            err[attr] = getattr(exc, attr)
    return {"error": err}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        artifacts = args.artifacts or str(Path(args.out).with_suffix("")) + ".d"
        doc = run_experiment(cfg, artifacts)
        write_results(doc, args.out)
    except (DSDGPError, OSError, ValueError, ArithmeticError) as exc:
        print(json.dumps(_error_doc(exc)), file=sys.stderr)
        return 2
    summary = {name: agg for name, agg in doc["aggregate"].items()}
    print(json.dumps({"model": doc["model"], "dataset": doc["dataset"]["name"], "aggregate": summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
