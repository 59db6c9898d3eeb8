"""Experiment harness: CSV ingestion, normalization, random splits, metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EmptyDataset, ParseError
from .model import DGPModel, predict_density, predict_moments, predict_proba
from .rng import RngStream
from .train import TrainConfig, initialize, train, write_trace_csv

log = logging.getLogger(__name__)

TASKS = ("regression", "classification")
TIMING_FIELDS = ("seconds", "wall_clock_seconds")
STD_CONVENTION = "sample standard deviation (N-1 divisor)"


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    name: str = "data"
    task: str = "regression"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"x has {len(self.x)} rows but y has {len(self.y)}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def _parse_row(cells, lineno):
    try:
        vals = [float(c) for c in cells]
    except ValueError:
        raise ParseError(f"line {lineno}: non-numeric value in {cells!r}", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(f"line {lineno}: missing or non-finite value", lineno)
    return vals


def _looks_numeric(cells) -> bool:
    try:
        [float(c) for c in cells]
    except ValueError:
        return False
    return True


def ingest_csv(path, target_columns=None, header: bool | None = None, task: str = "regression", name: str | None = None) -> Dataset:
    """Read a comma-separated numeric table.

    ``target_columns`` are column indices (negative allowed) and default to
    the last column. ``header=None`` skips the first row only if it does not
    parse as numbers. Blank lines are ignored; line numbers in errors are
    1-based and count every physical line.
    """
    path = Path(path)
    rows, width = [], None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in cells]
            if not cells or all(c == "" for c in cells):
                continue
            if lineno == 1 and (header or (header is None and not _looks_numeric(cells))):
                continue
            vals = _parse_row(cells, lineno)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"line {lineno}: expected {width} fields, got {len(vals)}", lineno)
            rows.append(vals)
    if not rows:
        raise EmptyDataset(f"{path} contains no data rows")
    table = np.array(rows)
    cols = [-1] if target_columns is None else list(target_columns)
    try:
        targets = sorted({c % width for c in cols})
        _ = [table[:, c] for c in targets]
    except (IndexError, ZeroDivisionError):
        raise ParseError(f"target columns {cols} out of range for {width} columns", 1) from None
    features = [c for c in range(width) if c not in targets]
    if not features:
        raise EmptyDataset("no feature columns left after removing targets")
    return Dataset(table[:, features], table[:, targets], name or path.stem, task)


# normalization -------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def denormalize_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean


def _column_stats(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1])
    # constant columns keep their scale
    return mean, np.where(std > 0, std, 1.0)


def normalize(train: Dataset, test: Dataset, scale_targets: bool | None = None):
    """Standardize with training-set statistics.

    Targets are scaled for regression only (``scale_targets`` overrides).
    Returns ``(train, test, stats)``.
    """
    if train.n == 0:
        raise EmptyDataset("cannot normalize an empty training set")
    if scale_targets is None:
        scale_targets = train.task == "regression"
    x_mean, x_std = _column_stats(train.x)
    if scale_targets:
        y_mean, y_std = _column_stats(train.y)
    else:
        y_mean, y_std = np.zeros(train.y.shape[1]), np.ones(train.y.shape[1])

    def apply(ds):
        return Dataset((ds.x - x_mean) / x_std, (ds.y - y_mean) / y_std, ds.name, ds.task)

    return apply(train), apply(test), NormStats(x_mean, x_std, y_mean, y_std)


# splits --------------------------------------------------------------------

def split_indices(n: int, test_fraction: float, rng: RngStream):
    """One random train/test split; the test set has ``round(fraction * n)`` rows (at least 1)."""
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def subset(ds: Dataset, idx) -> Dataset:
    return Dataset(ds.x[idx], ds.y[idx], ds.name, ds.task)


# evaluation ----------------------------------------------------------------

def evaluate(model: DGPModel, test: Dataset, stats: NormStats, rng: RngStream, samples: int = 100) -> dict:
    """Metrics on a normalized test split, reported in original units."""
    lik_rng, mom_rng = rng.spawn(2)
    log_dens = predict_density(model, test.x, test.y, lik_rng, samples)
    out = {"test_ll": float(np.mean(log_dens) - np.sum(np.log(stats.y_std)))}
    if test.task == "regression":
        mean, _ = predict_moments(model, test.x, mom_rng, samples)
        err = stats.denormalize_y(mean) - stats.denormalize_y(test.y)
        out["test_rmse"] = float(np.sqrt(np.mean(err**2)))
    else:
        prob = predict_proba(model, test.x, mom_rng, samples)
        out["test_accuracy"] = float(np.mean((prob > 0.5) == (test.y > 0.5)))
    return out


# experiments ---------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    task: str = "regression"
    layers: int = 1
    inducing: int = 100
    iterations: int = 20_000
    minibatch: int = 10_000
    lr: float = 0.01
    folds: int = 20
    seed: int = 0
    samples_pred: int = 100
    samples_train: int = 1
    test_fraction: float = 0.1
    target_columns: tuple = (-1,)
    header: bool | None = None
    jobs: int = 1
    log_every: int = 100

    def __post_init__(self):
        checks = [
            ("task", self.task in TASKS, f"must be one of {TASKS}"),
            ("layers", self.layers >= 1, "must be >= 1"),
            ("inducing", self.inducing >= 1, "must be >= 1"),
            ("iterations", self.iterations >= 1, "must be >= 1"),
            ("minibatch", self.minibatch >= 1, "must be >= 1"),
            ("lr", self.lr >= 0, "must be >= 0"),
            ("folds", self.folds >= 1, "must be >= 1"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("samples_pred", self.samples_pred >= 1, "must be >= 1"),
            ("samples_train", self.samples_train >= 1, "must be >= 1"),
            ("test_fraction", 0 < self.test_fraction < 1, "must be in (0, 1)"),
            ("jobs", self.jobs >= 1, "must be >= 1"),
            ("log_every", self.log_every >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})", name)
        object.__setattr__(self, "target_columns", tuple(self.target_columns))

    @classmethod
    def from_mapping(cls, doc) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(f"{name}: unknown config field", name)
        if "dataset" not in doc or doc["dataset"] in (None, ""):
            raise ConfigError("dataset: required", "dataset")
        kwargs = {}
        for name, value in doc.items():
            default = known[name].default
            try:
                if name in ("dataset", "task"):
                    value = str(value)
                elif name == "target_columns":
                    value = tuple(int(v) for v in value)
                elif name == "header":
                    value = None if value is None else bool(value)
                elif isinstance(default, bool):
                    value = bool(value)
                elif isinstance(default, int):
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError
                    value = int(value)
                elif isinstance(default, float):
                    value = float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{name}: invalid value {value!r}", name) from None
            kwargs[name] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_columns"] = list(self.target_columns)
        return d

    @property
    def family(self) -> str:
        return "SGP" if self.layers == 1 else f"DGP-{self.layers}"


def _run_fold(cfg: ExperimentConfig, ds: Dataset, fold: int, artifacts: str | None) -> dict:
    start = time.perf_counter()
    split_rng, init_rng, train_rng, eval_rng = RngStream.from_key(cfg.seed, fold).spawn(4)
    train_idx, test_idx = split_indices(ds.n, cfg.test_fraction, split_rng)
    train_ds, test_ds, stats = normalize(subset(ds, train_idx), subset(ds, test_idx))

    likelihood = "gaussian" if cfg.task == "regression" else "bernoulli"
    model = initialize(train_ds.x, train_ds.y, cfg.layers, cfg.inducing, init_rng, likelihood)
    tcfg = TrainConfig(cfg.iterations, cfg.minibatch, cfg.lr, cfg.samples_train, cfg.log_every, cfg.seed)
    result = train(model, train_ds.x, train_ds.y, tcfg, train_rng)
    metrics = evaluate(result.model, test_ds, stats, eval_rng, cfg.samples_pred)

    if artifacts is not None:
        out = Path(artifacts)
        out.mkdir(parents=True, exist_ok=True)
        result.model.save(out / f"fold{fold}.checkpoint.json")
        write_trace_csv(result.trace, out / f"fold{fold}.trace.csv")
    entry = {
        "fold": fold,
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "test_indices": test_idx.tolist(),
        **metrics,
        "final_elbo": result.trace[-1].elbo,
        "seconds": time.perf_counter() - start,
    }
    log.info("fold %d done: %s", fold, {k: v for k, v in entry.items() if k != "test_indices"})
    return entry


def _aggregate(values) -> dict:
    vals = np.asarray(values, dtype=float)
    stderr = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else None
    return {"mean": float(vals.mean()), "stderr": stderr}


def run_experiment(config, artifacts: str | None = None) -> dict:
    """Train and evaluate on every fold; returns the results document."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_mapping(config)
    start = time.perf_counter()
    ds = ingest_csv(cfg.dataset, cfg.target_columns, cfg.header, cfg.task)
    if cfg.inducing > ds.n:
        raise ConfigError(f"inducing: {cfg.inducing} exceeds the {ds.n} available rows", "inducing")

    if cfg.jobs > 1 and cfg.folds > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_run_fold, cfg, ds, k, artifacts) for k in range(cfg.folds)]
            folds = [f.result() for f in futures]
    else:
        folds = [_run_fold(cfg, ds, k, artifacts) for k in range(cfg.folds)]

    metric_names = ["test_ll", "test_rmse"] if cfg.task == "regression" else ["test_ll", "test_accuracy"]
    return {
        "schema_version": 1,
        "library": {"name": "dsdgp", "version": __version__},
        "config": cfg.to_dict(),
        "model": cfg.family,
        "dataset": {"name": ds.name, "n": ds.n, "d": ds.d, "task": ds.task},
        "conventions": {
            "std": STD_CONVENTION,
            "test_ll_units": "original target units (normalized-space log density minus sum of log output std)",
            "split": "independent random test sets per fold",
        },
        "folds": folds,
        "aggregate": {name: _aggregate([f[name] for f in folds]) for name in metric_names},
        "wall_clock_seconds": time.perf_counter() - start,
    }


def strip_timing(doc):
    """Copy of a results document without wall-clock fields."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_FIELDS}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc


def load_schema() -> dict:
    return json.loads((Path(__file__).with_name("results.schema.json")).read_text())


def write_results(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
