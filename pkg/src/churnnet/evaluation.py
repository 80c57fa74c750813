"""Zero-one loss, the simple/proposed variants and the learning-rate x depth sweep."""

from __future__ import annotations

import csv
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .features import DegenerateSplitError, LabeledDataset, SplitDatasets
from .network import Architecture, init_network, layer_sizes, predict
from .training import TrainConfig, train

VARIANTS = ("simple", "proposed")
DEFAULT_L1 = 1e-5
DEFAULT_L2 = 1e-4
QUANTILE_METHOD = "linear"  # Hyndman-Fan type 7

SWEEP_COLUMNS = ["split", "horizon", "variant", "lr", "layers", "seed", "test_error", "epochs", "seconds", "status"]
SUMMARY_COLUMNS = [
    "split", "horizon", "variant", "cells", "min", "q1", "median", "q3", "max",
    "best_lr", "best_layers", "best_seed", "quantile_method",
]


def zero_one_loss(predictions, labels) -> float:
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.size == 0:
        raise ValueError("zero-one loss of an empty set is undefined")
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    return float(np.mean(predictions != labels))


def accuracy(error: float) -> float:
    return (1 - error) * 100


def make_variant(
    variant: str,
    layers: int,
    periods: int = 100,
    keep_p: float = 0.5,
    l1: float = DEFAULT_L1,
    l2: float = DEFAULT_L2,
) -> tuple[Architecture, dict]:
    """Architecture plus TrainConfig overrides for one of the two compared networks.

    ``simple`` is the baseline: tanh units, no dropout, plain SGD. ``proposed``
    uses ReLU units, dropout and the momentum schedule. Both keep L1/L2 on the
    output layer.
    """
    sizes = layer_sizes(periods, layers)
    if variant == "simple":
        arch = Architecture(sizes, "tanh", 1.0, l1, l2)
        return arch, {"momentum_init": 0.0, "momentum_growth": 1.0}
    if variant == "proposed":
        return Architecture(sizes, "relu", keep_p, l1, l2), {}
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass(frozen=True)
class SweepGrid:
    learning_rates: tuple[float, ...] = (0.0001, 0.001, 0.01)
    total_layers: tuple[int, ...] = (4, 5, 6)
    variants: tuple[str, ...] = VARIANTS

    def __post_init__(self):
        if not self.learning_rates or not self.total_layers or not self.variants:
            raise ValueError("sweep grid lists must be non-empty")
        if any(n < 3 for n in self.total_layers):
            raise ValueError("layer counts must be >= 3")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be positive")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")


@dataclass(frozen=True, order=True)
class CellKey:
    split: int
    horizon: int
    variant: str
    lr: float
    layers: int
    seed: int


@dataclass
class CellResult:
    key: CellKey
    test_error: float
    epochs: int
    seconds: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepResult:
    cells: list[CellResult] = field(default_factory=list)

    def errors(self, split=None, variant=None) -> list[float]:
        return [
            c.test_error
            for c in self.cells
            if c.ok
            and (split is None or c.key.split == split)
            and (variant is None or c.key.variant == variant)
        ]


@dataclass(frozen=True)
class SweepSettings:
    train: TrainConfig = TrainConfig()
    keep_p: float = 0.5
    l1: float = DEFAULT_L1
    l2: float = DEFAULT_L2


def _as_triple(ds) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    if isinstance(ds, SplitDatasets):
        return ds.train, ds.valid, ds.test
    return tuple(ds)


def run_cell(key: CellKey, data, settings: SweepSettings) -> CellResult:
    t0 = time.perf_counter()
    try:
        tr, va, te = _as_triple(data)
        for name, part in (("train", tr), ("valid", va), ("test", te)):
            if len(part) == 0:
                raise DegenerateSplitError(key.split, f"{name} set is empty")
        if len(np.unique(tr.y)) < 2:
            raise DegenerateSplitError(key.split, "training set holds a single class")
        arch, overrides = make_variant(key.variant, key.layers, tr.periods, settings.keep_p, settings.l1, settings.l2)
        config = replace(settings.train, learning_rate=key.lr, seed=key.seed, **overrides)
        net = init_network(arch, key.seed)
        best, state = train(net, tr, va, config)
        err = zero_one_loss(predict(best, te.X), te.y)
        return CellResult(key, err, state.epoch, time.perf_counter() - t0)
    except Exception as exc:
        return CellResult(key, math.nan, 0, time.perf_counter() - t0, f"failed: {exc}")


_WORKER_DATA: dict = {}


def _init_worker(data, settings):
    _WORKER_DATA["data"] = data
    _WORKER_DATA["settings"] = settings


def _run_in_worker(key: CellKey, slot: int) -> CellResult:
    return run_cell(key, _WORKER_DATA["data"][slot], _WORKER_DATA["settings"])


def sweep_keys(datasets: Sequence, grid: SweepGrid, seeds: Sequence[int]) -> list[tuple[CellKey, int]]:
    keys = []
    for slot, ds in enumerate(datasets):
        tr = _as_triple(ds)[0]
        for variant, lr, layers, seed in itertools.product(grid.variants, grid.learning_rates, grid.total_layers, seeds):
            keys.append((CellKey(tr.split_index, tr.horizon_splits, variant, lr, layers, seed), slot))
    return sorted(keys)


def run_sweep(
    datasets: Sequence,
    grid: SweepGrid = SweepGrid(),
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 1,
    settings: SweepSettings = SweepSettings(),
) -> SweepResult:
    """Train and test every (split, variant, lr, layers, seed) cell.

    Cells are independent; with ``workers > 1`` they run in a process pool.
    Results come back sorted by cell key either way. A failing cell is
    recorded with status ``failed: ...`` and a NaN error.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if not seeds:
        raise ValueError("need at least one seed")
    keys = sweep_keys(datasets, grid, seeds)
    if workers == 1 or len(keys) <= 1:
        cells = [run_cell(k, datasets[slot], settings) for k, slot in keys]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(list(datasets), settings)) as pool:
            cells = list(pool.map(_run_in_worker, [k for k, _ in keys], [s for _, s in keys]))
    return SweepResult(sorted(cells, key=lambda c: c.key))


def summarize(result: SweepResult) -> list[dict]:
    """Box-plot statistics of test error per (split, horizon, variant)."""
    groups: dict[tuple, list[CellResult]] = {}
    for c in result.cells:
        groups.setdefault((c.key.split, c.key.horizon, c.key.variant), []).append(c)
    rows = []
    for (split, horizon, variant), cells in sorted(groups.items()):
        ok = [c for c in cells if c.ok]
        row = {"split": split, "horizon": horizon, "variant": variant, "cells": len(ok),
               "quantile_method": QUANTILE_METHOD}
        if ok:
            errs = np.array([c.test_error for c in ok])
            q = np.percentile(errs, [0, 25, 50, 75, 100], method=QUANTILE_METHOD)
            best = min(ok, key=lambda c: (c.test_error, c.key))
            row.update(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))
            row.update(best_lr=best.key.lr, best_layers=best.key.layers, best_seed=best.key.seed)
        else:
            row.update({k: math.nan for k in ("min", "q1", "median", "q3", "max")})
            row.update(best_lr="", best_layers="", best_seed="")
        rows.append(row)
    return rows


def _num(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_sweep_csv(path, result: SweepResult, record_seconds: bool = False) -> None:
    """One row per cell. ``seconds`` is left blank unless ``record_seconds`` (wall time varies run to run)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in result.cells:
            k = c.key
            w.writerow([
                k.split, k.horizon, k.variant, repr(float(k.lr)), k.layers, k.seed,
                _num(float(c.test_error)), c.epochs,
                repr(round(c.seconds, 3)) if record_seconds else "", c.status,
            ])


def read_sweep_csv(path) -> SweepResult:
    cells = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = CellKey(int(row["split"]), int(row["horizon"]), row["variant"], float(row["lr"]),
                          int(row["layers"]), int(row["seed"]))
            err = float(row["test_error"]) if row["test_error"] else math.nan
            secs = float(row["seconds"]) if row["seconds"] else math.nan
            cells.append(CellResult(key, err, int(row["epochs"]), secs, row.get("status", "ok") or "ok"))
    return SweepResult(cells)


def write_summary_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_num(r[c]) for c in SUMMARY_COLUMNS])
