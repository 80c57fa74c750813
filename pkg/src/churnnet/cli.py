"""Command-line entry point: ``churnnet {synth,build,train,sweep,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.

Every flag can also come from ``--config FILE``: one ``key = value`` per
line, keys spelled like the flags (``learning-rate`` or ``learning_rate``),
``#`` starts a comment. Flags given on the command line win over the file.

All randomness comes from ``--seed``; each stage derives its own stream
from it (see the ``features``, ``training`` and ``synth`` modules).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace

from . import __version__
from .evaluation import (
    VARIANTS,
    SweepGrid,
    SweepSettings,
    accuracy,
    make_variant,
    run_sweep,
    summarize,
    write_summary_csv,
    write_sweep_csv,
    zero_one_loss,
)
from .features import (
    DegenerateSplitError,
    Engine,
    build_split_datasets,
    n_datasets,
    read_dataset_csv,
    read_split_datasets,
    split_dir_name,
    splits_covering,
    write_split_datasets,
)
from .ingest import IngestError, iter_dump_paths, load_records
from .network import init_network, load_network, predict, save_network
from .synth import REGIMES, SynthConfig, generate_log, write_raw_dumps
from .training import DivergenceError, TrainConfig, train, write_history_csv

log = logging.getLogger("churnnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


REQUIRED = {
    "synth": ["seed", "out"],
    "build": ["raw_dump", "out"],
    "train": ["out"],
    "sweep": ["data", "out"],
    "eval": ["model", "test"],
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="churnnet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"churnnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--config", metavar="FILE", help="key=value file supplying flag defaults")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("synth", help="write synthetic raw-dump files")
    common(s, seed_default=None)
    s.add_argument("--out", help="output directory")
    s.add_argument("--users", type=int, default=200)
    s.add_argument("--days", type=int, default=150)
    s.add_argument("--regime", choices=REGIMES, default="subscription")
    s.add_argument("--churn-fraction", type=float, default=0.4)
    s.add_argument("--base-rate", type=float, default=2.0)
    s.add_argument("--decay", type=float, default=0.85)
    s.add_argument("--burst-gap-days", type=float, default=10.0)

    b = sub.add_parser("build", help="raw dumps -> train/valid/test CSVs")
    common(b)
    b.add_argument("--raw-dump", nargs="+", metavar="PATH", help="raw-dump files or directories")
    b.add_argument("--out", help="output directory")
    b.add_argument("--split-length", type=int, default=30, help="days per split")
    b.add_argument("--window-splits", type=int, default=2)
    b.add_argument("--horizon-splits", type=int, choices=(1, 2), default=1)
    b.add_argument("--periods", type=int, default=100)
    b.add_argument("--inactivity-days", type=int, default=30)
    b.add_argument("--time-unit", choices=("s", "ms"), default="s")
    b.add_argument("--start", type=int, help="unix time of the first split (default: midnight before first event)")
    b.add_argument("--end", type=int, help="unix time bounding the last split")
    b.add_argument("--splits", type=_csv_list(int), help="dataset indices to build (default: all)")
    b.add_argument("--partitions", type=int, default=4)
    b.add_argument("--no-normalize", action="store_true", help="keep raw event counts")

    def train_flags(sp):
        sp.add_argument("--lr", "--learning-rate", dest="lr", type=float, default=0.001)
        sp.add_argument("--momentum", type=float, default=0.5, help="initial momentum (proposed variant)")
        sp.add_argument("--epochs", type=int, default=200, help="maximum epochs")
        sp.add_argument("--patience", type=int, default=10)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--keep-p", type=float, default=0.5, help="dropout keep probability (proposed variant)")
        sp.add_argument("--l1", type=float, default=1e-5)
        sp.add_argument("--l2", type=float, default=1e-4)

    t = sub.add_parser("train", help="train one network")
    common(t)
    t.add_argument("--data", help="directory holding train.csv and valid.csv (test.csv optional)")
    t.add_argument("--train", dest="train_csv", help="training CSV (instead of --data)")
    t.add_argument("--valid", dest="valid_csv", help="validation CSV (instead of --data)")
    t.add_argument("--out", help="root for the run directory")
    t.add_argument("--variant", choices=VARIANTS, default="proposed")
    t.add_argument("--layers", type=int, default=4, help="total layers, input and output included")
    train_flags(t)

    w = sub.add_parser("sweep", help="learning rate x depth x variant sweep")
    common(w)
    w.add_argument("--data", help="build output directory (split_* subdirectories) or one split directory")
    w.add_argument("--out", help="root for the run directory")
    w.add_argument("--variants", type=_csv_list(str), default=list(VARIANTS))
    w.add_argument("--lrs", type=_csv_list(float), default=[0.0001, 0.001, 0.01])
    w.add_argument("--layers", type=_csv_list(int), default=[4, 5, 6])
    w.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    w.add_argument("--record-seconds", action="store_true", help="fill the wall-time column (breaks byte-identical reruns)")
    train_flags(w)

    e = sub.add_parser("eval", help="zero-one error of a saved model")
    common(e)
    e.add_argument("--model", help="model JSON")
    e.add_argument("--test", help="test CSV")
    e.add_argument("--out", help="root for the run directory (optional)")
    return p


# ---------------------------------------------------------------- config file

def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            values[k.lstrip("-").replace("-", "_")] = v
    return values


def _apply_config(parser, argv, args):
    """Re-parse with the config file's values as defaults."""
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    values = read_config_file(args.config)
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    problems = []
    for key, raw in values.items():
        key = {"learning_rate": "lr", "train": "train_csv", "valid": "valid_csv"}.get(key, key)
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            problems.append(f"unknown config key {key!r}")
            continue
        try:
            if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.nargs == "+":
                defaults[key] = raw.split()
            else:
                defaults[key] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            problems.append(f"config key {key!r}: {exc}")
    if problems:
        raise UsageError("; ".join(problems))
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _run_dir(root, command: str, seed: int) -> str:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    path = os.path.join(root, f"{command}-{stamp}-seed{seed}")
    n = 1
    while os.path.exists(path):
        n += 1
        path = os.path.join(root, f"{command}-{stamp}-seed{seed}-{n}")
    os.makedirs(path)
    return path


def write_manifest(path, args, inputs, outputs, started, extra=None) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "tool": "churnnet",
        "version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {p: _sha256(p) for p in inputs if os.path.isfile(p)},
        "outputs": sorted(outputs),
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _train_config(args, seed) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        momentum_init=args.momentum,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=seed,
    )


def _train_problems(args) -> list[str]:
    probs = []
    try:
        TrainConfig(learning_rate=args.lr, momentum_init=args.momentum, batch_size=args.batch_size,
                    max_epochs=args.epochs, patience=args.patience)
    except ValueError as exc:
        probs += str(exc).split("; ")
    if not 0 < args.keep_p <= 1:
        probs.append(f"--keep-p must lie in (0, 1], got {args.keep_p}")
    if args.l1 < 0 or args.l2 < 0:
        probs.append("--l1 and --l2 must be non-negative")
    return probs


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        cfg = SynthConfig(
            n_users=args.users, days=args.days, churn_fraction=args.churn_fraction, regime=args.regime,
            base_rate=args.base_rate, decay=args.decay, burst_gap_days=args.burst_gap_days, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    started = _now()
    synthetic = generate_log(cfg)
    paths = write_raw_dumps(synthetic, args.out)
    print(f"wrote {len(paths)} raw-dump files ({len(synthetic.events)} events, "
          f"{len(synthetic.truth)} registered users) to {args.out}")
    write_manifest(os.path.join(args.out, "manifest.json"), args, [], paths + ["ground_truth.csv"], started,
                   {"synth_config": asdict(cfg)})
    return EXIT_OK


def cmd_build(args) -> int:
    problems = []
    for flag in ("split_length", "window_splits", "periods", "inactivity_days", "partitions", "workers"):
        if getattr(args, flag) < 1:
            problems.append(f"--{flag.replace('_', '-')} must be >= 1")
    if problems:
        raise UsageError("; ".join(problems))
    missing = [p for p in args.raw_dump if not os.path.exists(p)]
    if missing:
        raise DataError(f"raw dump path(s) not found: {', '.join(missing)}")
    started = _now()
    paths = iter_dump_paths(args.raw_dump)
    if not paths:
        raise DataError("no raw-dump files found")
    records, stats = load_records(paths, args.time_unit)
    skipped = sum(s.skipped for s in stats)
    print(f"read {sum(s.lines_read for s in stats)} lines from {len(stats)} files: "
          f"{len(records)} registered-user events, {skipped} skipped")
    splits = splits_covering(records, args.split_length, args.start, args.end)
    count = n_datasets(len(splits), args.window_splits, args.horizon_splits)
    if count == 0:
        raise DataError(
            f"{len(splits)} whole {args.split_length}-day splits are not enough for a "
            f"{args.window_splits}-split window, {args.horizon_splits}-split horizon and a shifted evaluation window"
        )
    indices = args.splits if args.splits else list(range(count))
    bad = [i for i in indices if not 0 <= i < count]
    if bad:
        raise UsageError(f"--splits {bad} out of range 0..{count - 1}")
    engine = Engine(args.workers, args.partitions, use_dataflow=True)
    os.makedirs(args.out, exist_ok=True)
    outputs, degenerate = [], []
    for idx in indices:
        try:
            sd = build_split_datasets(
                records, splits, idx, args.window_splits, args.horizon_splits, args.periods,
                args.seed, not args.no_normalize, args.inactivity_days, engine,
            )
        except DegenerateSplitError as exc:
            print(f"split {idx}: {exc}", file=sys.stderr)
            degenerate.append(idx)
            continue
        d = os.path.join(args.out, split_dir_name(idx, args.horizon_splits))
        write_split_datasets(sd, d)
        outputs.append(d)
        before, after = sd.meta["class_counts_before"], sd.meta["class_counts_after"]
        print(f"split {idx}: train {before['train']} -> {after['train']}, "
              f"valid/test pool {before['pool']} -> valid {after['valid']} / test {after['test']}")
    write_manifest(os.path.join(args.out, "manifest.json"), args, paths, outputs, started,
                   {"splits": [[s.start, s.end] for s in splits], "degenerate_splits": degenerate})
    if degenerate:
        print(f"degenerate split(s): {', '.join(map(str, degenerate))}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _load_train_data(args):
    if args.data:
        tr = read_dataset_csv(os.path.join(args.data, "train.csv"))
        va = read_dataset_csv(os.path.join(args.data, "valid.csv"))
        test_path = os.path.join(args.data, "test.csv")
        te = read_dataset_csv(test_path) if os.path.exists(test_path) else None
        return tr, va, te, [os.path.join(args.data, f) for f in ("train.csv", "valid.csv", "test.csv")]
    if not (args.train_csv and args.valid_csv):
        raise UsageError("give --data DIR, or both --train and --valid")
    return read_dataset_csv(args.train_csv), read_dataset_csv(args.valid_csv), None, [args.train_csv, args.valid_csv]


def cmd_train(args) -> int:
    problems = _train_problems(args)
    if args.layers < 3:
        problems.append("--layers must be >= 3")
    if problems:
        raise UsageError("; ".join(problems))
    started = _now()
    tr, va, te, inputs = _load_train_data(args)
    arch, overrides = make_variant(args.variant, args.layers, tr.periods, args.keep_p, args.l1, args.l2)
    config = replace(_train_config(args, args.seed), **overrides)
    best, state = train(init_network(arch, args.seed), tr, va, config)
    run = _run_dir(args.out, "train", args.seed)
    save_network(best, os.path.join(run, "model.json"))
    write_history_csv(os.path.join(run, "train_log.csv"), state)
    outputs = [os.path.join(run, "model.json"), os.path.join(run, "train_log.csv")]
    print(f"{args.variant} {arch.layer_sizes}: best validation error {state.best_valid_error:.4f} "
          f"at epoch {state.best_epoch} of {state.epoch}")
    extra = {"train_config": asdict(config), "architecture": arch.to_dict(), "warnings": state.warnings}
    if te is not None and len(te):
        err = zero_one_loss(predict(best, te.X), te.y)
        print(f"test error {err:.4f} (accuracy {accuracy(err):.2f}%)")
        extra["test_error"] = err
    write_manifest(os.path.join(run, "manifest.json"), args, inputs, outputs, started, extra)
    print(f"run directory: {run}")
    return EXIT_OK


def _split_dirs(root) -> list[str]:
    if os.path.exists(os.path.join(root, "train.csv")):
        return [root]
    if not os.path.isdir(root):
        raise DataError(f"dataset directory {root} not found")
    dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if d.startswith("split_") and os.path.exists(os.path.join(root, d, "train.csv"))
    )
    if not dirs:
        raise DataError(f"no split_* dataset directories under {root}")
    return dirs


def cmd_sweep(args) -> int:
    problems = _train_problems(args)
    try:
        grid = SweepGrid(tuple(args.lrs), tuple(args.layers), tuple(args.variants))
    except ValueError as exc:
        problems.append(str(exc))
    if not args.seeds:
        problems.append("--seeds must list at least one seed")
    if args.workers < 1:
        problems.append("--workers must be >= 1")
    if problems:
        raise UsageError("; ".join(problems))
    started = _now()
    dirs = _split_dirs(args.data)
    datasets = [read_split_datasets(d) for d in dirs]
    settings = SweepSettings(_train_config(args, args.seed), args.keep_p, args.l1, args.l2)
    result = run_sweep(datasets, grid, args.seeds, args.workers, settings)
    rows = summarize(result)
    run = _run_dir(args.out, "sweep", args.seed)
    sweep_csv, summary_csv = os.path.join(run, "sweep.csv"), os.path.join(run, "summary.csv")
    write_sweep_csv(sweep_csv, result, args.record_seconds)
    write_summary_csv(summary_csv, rows)
    failed = [c for c in result.cells if not c.ok]
    for r in rows:
        print(f"split {r['split']} h{r['horizon']} {r['variant']:>8}: min {r['min']:.3f} "
              f"median {r['median']:.3f} max {r['max']:.3f} ({r['cells']} cells)")
    if failed:
        print(f"{len(failed)} cell(s) failed; see the status column", file=sys.stderr)
    inputs = [os.path.join(d, f) for d in dirs for f in ("train.csv", "valid.csv", "test.csv")]
    write_manifest(os.path.join(run, "manifest.json"), args, inputs, [sweep_csv, summary_csv], started,
                   {"quantile_method": "linear (type 7)", "failed_cells": len(failed)})
    print(f"run directory: {run}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    for p in (args.model, args.test):
        if not os.path.isfile(p):
            raise DataError(f"{p} not found")
    net = load_network(args.model)
    te = read_dataset_csv(args.test)
    if te.periods != net.arch.layer_sizes[0]:
        raise DataError(f"test data has {te.periods} features, model expects {net.arch.layer_sizes[0]}")
    err = zero_one_loss(predict(net, te.X), te.y)
    print(f"test error {err:.4f} (accuracy {accuracy(err):.2f}%) on {len(te)} rows")
    if args.out:
        run = _run_dir(args.out, "eval", args.seed)
        out = os.path.join(run, "eval.csv")
        with open(out, "w") as fh:
            fh.write("model,test,rows,test_error,accuracy\n")
            fh.write(f"{args.model},{args.test},{len(te)},{err!r},{accuracy(err)!r}\n")
        write_manifest(os.path.join(run, "manifest.json"), args, [args.model, args.test], [out], started)
        print(f"run directory: {run}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "build": cmd_build, "train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k, None) in (None, [])]
        if missing:
            raise UsageError(f"missing required flag(s): {', '.join(missing)}")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"churnnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"churnnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, IngestError, DegenerateSplitError, OSError, ValueError) as exc:
        print(f"churnnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
