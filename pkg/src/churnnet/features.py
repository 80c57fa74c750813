"""User event vectors, churn labels and train/validation/test construction.

Time is cut into consecutive splits (30 days by default). A dataset for split
index ``s`` is built the same way twice, once for training and once, shifted
forward by one split, for validation/test:

* the input window is ``window_splits`` splits starting at ``s``; every
  registered user with an event inside it gets a vector of ``periods`` event
  counts over equal subdivisions of the window;
* churn labels come from the user's events over window + horizon (the next
  ``horizon_splits`` splits): -1 if the user's event span there is under the
  inactivity threshold (new user), 1 if the last event is more than the
  threshold before the horizon end, else 0;
* vectors and labels are joined on user id and -1 rows dropped.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import dataflow
from .ingest import EventRecord

DAY = 86400


class DegenerateSplitError(ValueError):
    """A split produced a dataset missing one of the two classes."""

    def __init__(self, split_index: int, detail: str):
        super().__init__(f"degenerate split {split_index}: {detail}")
        self.split_index = split_index


@dataclass(frozen=True)
class SplitSpec:
    index: int
    start: int
    split_length_days: int = 30

    def __post_init__(self):
        if self.split_length_days <= 0:
            raise ValueError("split_length_days must be positive")

    @property
    def end(self) -> int:
        return self.start + self.split_length_days * DAY


@dataclass(frozen=True)
class WindowSpec:
    splits: tuple[SplitSpec, ...]
    periods: int = 100

    def __post_init__(self):
        if not self.splits:
            raise ValueError("a window needs at least one split")
        if self.periods < 1:
            raise ValueError("periods must be >= 1")
        for a, b in zip(self.splits, self.splits[1:]):
            if a.end != b.start:
                raise ValueError(f"splits {a.index} and {b.index} are not contiguous")

    @property
    def start(self) -> int:
        return self.splits[0].start

    @property
    def end(self) -> int:
        return self.splits[-1].end

    def __contains__(self, t) -> bool:
        return self.start <= t < self.end


def make_splits(origin: int, split_length_days: int, count: int) -> list[SplitSpec]:
    step = split_length_days * DAY
    return [SplitSpec(i, origin + i * step, split_length_days) for i in range(count)]


def splits_covering(
    records: Sequence[EventRecord],
    split_length_days: int = 30,
    start: int | None = None,
    end: int | None = None,
) -> list[SplitSpec]:
    """Whole splits between ``start`` and ``end``.

    Defaults: ``start`` is the UTC midnight before the first event and
    ``end`` the UTC midnight after the last one.
    """
    if start is None or end is None:
        if not records:
            return []
        times = [r.time for r in records]
        if start is None:
            start = min(times) // DAY * DAY
        if end is None:
            end = (max(times) // DAY + 1) * DAY
    count = max(0, (end - start) // (split_length_days * DAY))
    return make_splits(start, split_length_days, count)


def assign_period(t, window: WindowSpec) -> int:
    if not window.start <= t < window.end:
        raise ValueError(f"time {t} outside window [{window.start}, {window.end})")
    # integer arithmetic keeps bin edges exact
    p = (window.periods * (int(t) - window.start)) // (window.end - window.start)
    return min(p, window.periods - 1)


@dataclass
class UserEventVector:
    user_id: int
    counts: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, UserEventVector)
            and self.user_id == other.user_id
            and np.array_equal(self.counts, other.counts)
        )


def build_event_vectors(records: Iterable[EventRecord], window: WindowSpec) -> list[UserEventVector]:
    """One count vector per user with at least one event in the window, sorted by user id."""
    per_user: dict[int, np.ndarray] = {}
    for r in records:
        if r.time in window:
            v = per_user.get(r.user_id)
            if v is None:
                v = per_user[r.user_id] = np.zeros(window.periods, dtype=np.int64)
            v[assign_period(r.time, window)] += 1
    return [UserEventVector(u, per_user[u]) for u in sorted(per_user)]


def label_from_span(first: int, last: int, horizon_end: int, inactivity_days: int = 30) -> int:
    threshold = inactivity_days * DAY
    if last - first < threshold:
        return -1
    if horizon_end - last > threshold:
        return 1
    return 0


def compute_churn_label(times: Iterable, horizon_end: int, inactivity_days: int = 30) -> int:
    """Label from one user's event times (or EventRecords) over window + horizon.

    The new-user rule (-1) is checked before the churn rule.
    """
    ts = [t.time if isinstance(t, EventRecord) else t for t in times]
    if not ts:
        raise ValueError("cannot label a user with no events")
    return label_from_span(min(ts), max(ts), horizon_end, inactivity_days)


def label_users(
    records: Iterable[EventRecord], start: int, horizon_end: int, inactivity_days: int = 30
) -> dict[int, int]:
    spans: dict[int, list[int]] = {}
    for r in records:
        if start <= r.time < horizon_end:
            s = spans.get(r.user_id)
            if s is None:
                spans[r.user_id] = [r.time, r.time]
            else:
                s[0] = min(s[0], r.time)
                s[1] = max(s[1], r.time)
    return {
        u: label_from_span(first, last, horizon_end, inactivity_days)
        for u, (first, last) in sorted(spans.items())
    }


@dataclass
class LabeledDataset:
    user_ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    split_index: int = 0
    horizon_splits: int = 1

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.user_ids), -1)
        if not len(self.user_ids) == len(self.X) == len(self.y):
            raise ValueError("user_ids, X and y must have the same length")
        if np.any((self.y != 0) & (self.y != 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.y)

    @property
    def periods(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> dict[int, int]:
        return {0: int(np.sum(self.y == 0)), 1: int(np.sum(self.y == 1))}

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.user_ids[idx], self.X[idx], self.y[idx], self.split_index, self.horizon_splits
        )


def assemble_split_dataset(
    vectors: Sequence[UserEventVector],
    labels: Mapping[int, int] | Iterable[tuple[int, int]],
    split_index: int = 0,
    horizon_splits: int = 1,
    periods: int | None = None,
) -> LabeledDataset:
    """Inner-join vectors with labels and drop new users (label -1)."""
    pairs = list(labels.items()) if isinstance(labels, Mapping) else list(labels)
    label_of: dict[int, int] = {}
    for u, lab in pairs:
        if u in label_of:
            raise ValueError(f"duplicate label for user {u}")
        label_of[u] = lab
    seen: set[int] = set()
    ids, rows, ys = [], [], []
    for vec in vectors:
        if vec.user_id in seen:
            raise ValueError(f"duplicate event vector for user {vec.user_id}")
        seen.add(vec.user_id)
        lab = label_of.get(vec.user_id)
        if lab is None or lab == -1:
            continue
        ids.append(vec.user_id)
        rows.append(vec.counts)
        ys.append(lab)
    if periods is None:
        periods = len(vectors[0].counts) if vectors else 0
    X = np.array(rows, dtype=np.float64).reshape(len(rows), periods)
    return LabeledDataset(np.array(ids, dtype=np.int64), X, np.array(ys), split_index, horizon_splits)


@dataclass
class Scaler:
    """Divides counts by the largest count seen at fit time; clamps to 1 afterwards."""

    max_count: float = 0.0

    @classmethod
    def fit(cls, dataset: LabeledDataset) -> "Scaler":
        return cls(float(dataset.X.max()) if dataset.X.size else 0.0)

    def transform(self, dataset: LabeledDataset) -> LabeledDataset:
        if self.max_count <= 0:
            return dataset
        X = np.minimum(dataset.X / self.max_count, 1.0)
        return LabeledDataset(dataset.user_ids, X, dataset.y, dataset.split_index, dataset.horizon_splits)


def normalize(dataset: LabeledDataset, scaler: Scaler | None = None) -> tuple[LabeledDataset, Scaler]:
    if np.any(dataset.X < 0):
        raise ValueError("event counts must be non-negative")
    scaler = scaler or Scaler.fit(dataset)
    return scaler.transform(dataset), scaler


def balance_undersample(dataset: LabeledDataset, seed) -> LabeledDataset:
    """Randomly drop majority-class rows until both classes match the minority count."""
    counts = dataset.class_counts()
    if min(counts.values()) == 0:
        raise DegenerateSplitError(dataset.split_index, f"class counts {counts}")
    rng = np.random.default_rng(seed)
    n = min(counts.values())
    keep = []
    for c in (0, 1):
        idx = np.flatnonzero(dataset.y == c)
        keep.append(idx if len(idx) == n else rng.choice(idx, size=n, replace=False))
    return dataset.subset(np.sort(np.concatenate(keep)))


def split_val_test(dataset: LabeledDataset, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Random 50/50 split; validation takes the extra row when the size is odd."""
    n = len(dataset)
    if n < 2:
        raise ValueError(f"need at least 2 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    cut = (n + 1) // 2
    return dataset.subset(np.sort(perm[:cut])), dataset.subset(np.sort(perm[cut:]))


# ---------------------------------------------------------------- pipeline

@dataclass
class Engine:
    """How to run vector and label jobs: on the dataflow engine or in plain loops."""

    workers: int = 1
    partitions: int = 1
    use_dataflow: bool = True


def _period_key(window: WindowSpec):
    def key(r: EventRecord):
        return ((r.user_id, assign_period(r.time, window)), 1)

    return key


def _add(a, b):
    return a + b


def _to_user(pair):
    (user, period), n = pair
    return user, ((period, n),)


def _span(r: EventRecord):
    return r.user_id, (r.time, r.time)


def _merge_span(a, b):
    return min(a[0], b[0]), max(a[1], b[1])


def vectors_plan(records: dataflow.Plan, window: WindowSpec) -> dataflow.Plan:
    """(user_id, ((period, count), ...)) pairs for users active in ``window``."""
    return (
        records.filter(lambda r: window.start <= r.time < window.end, name="in_window")
        .map(_period_key(window), name="to_period")
        .reduce_by_key(_add, name="count_periods")
        .map(_to_user, name="by_user")
        .reduce_by_key(_add, name="collect_periods")
    )


def labels_plan(
    records: dataflow.Plan, start: int, horizon_end: int, inactivity_days: int = 30
) -> dataflow.Plan:
    """(user_id, label) pairs over [start, horizon_end)."""
    return (
        records.filter(lambda r: start <= r.time < horizon_end, name="in_label_range")
        .map(_span, name="to_span")
        .reduce_by_key(_merge_span, name="event_span")
        .map(lambda kv: (kv[0], label_from_span(kv[1][0], kv[1][1], horizon_end, inactivity_days)),
             name="label")
    )


def labeled_rows_plan(
    records: dataflow.Plan, window: WindowSpec, horizon_end: int, inactivity_days: int = 30
) -> dataflow.Plan:
    """The full per-window DAG: vectors joined with labels, new users filtered out."""
    joined = vectors_plan(records, window).join(
        labels_plan(records, window.start, horizon_end, inactivity_days), name="join_labels"
    )
    return joined.filter(lambda kv: kv[1][1] != -1, name="drop_new_users")


def _densify(cells, periods: int) -> np.ndarray:
    v = np.zeros(periods, dtype=np.int64)
    for p, n in cells:
        v[p] += n
    return v


def window_dataset(
    records: Sequence[EventRecord],
    window: WindowSpec,
    horizon_end: int,
    split_index: int = 0,
    horizon_splits: int = 1,
    inactivity_days: int = 30,
    engine: Engine | None = None,
) -> LabeledDataset:
    """Counts (unnormalized) joined with labels for one input window."""
    engine = engine or Engine(use_dataflow=False)
    if not engine.use_dataflow:
        vectors = build_event_vectors(records, window)
        labels = label_users(records, window.start, horizon_end, inactivity_days)
        return assemble_split_dataset(vectors, labels, split_index, horizon_splits, window.periods)
    source = records if isinstance(records, dataflow.Plan) else dataflow.plan_source(records)
    rows = dataflow.execute(
        labeled_rows_plan(source, window, horizon_end, inactivity_days),
        workers=engine.workers,
        partitions=engine.partitions,
    )
    vectors = [UserEventVector(u, _densify(cells, window.periods)) for u, (cells, _) in rows]
    labels = [(u, lab) for u, (_, lab) in rows]
    return assemble_split_dataset(vectors, labels, split_index, horizon_splits, window.periods)


@dataclass
class SplitDatasets:
    train: LabeledDataset
    valid: LabeledDataset
    test: LabeledDataset
    meta: dict = field(default_factory=dict)


def n_datasets(n_splits: int, window_splits: int = 2, horizon_splits: int = 1) -> int:
    # the validation/test window sits one split after the training window
    return max(0, n_splits - window_splits - horizon_splits)


def build_split_datasets(
    records: Sequence[EventRecord],
    splits: Sequence[SplitSpec],
    index: int,
    window_splits: int = 2,
    horizon_splits: int = 1,
    periods: int = 100,
    seed: int = 0,
    normalize_counts: bool = True,
    inactivity_days: int = 30,
    engine: Engine | None = None,
) -> SplitDatasets:
    """Train / validation / test datasets for dataset index ``index``.

    Training uses window ``splits[index : index + window_splits]``; the
    validation/test pool uses the same construction one split later and is
    divided 50/50 after balancing. Both are balanced by under-sampling. The
    normalization constant is fit on the balanced training set only.

    Random streams are derived as ``default_rng([seed, stage, index])`` with
    stage 1 = training balance, 2 = pool balance, 3 = validation/test split.
    """
    if window_splits < 1 or horizon_splits < 1:
        raise ValueError("window_splits and horizon_splits must be >= 1")
    if horizon_splits not in (1, 2):
        raise ValueError("horizon_splits must be 1 or 2")
    needed = index + 1 + window_splits + horizon_splits
    if index < 0 or needed > len(splits):
        raise ValueError(f"dataset {index} needs {needed} splits, only {len(splits)} available")

    def one(offset: int) -> tuple[LabeledDataset, WindowSpec, int]:
        first = index + offset
        window = WindowSpec(tuple(splits[first : first + window_splits]), periods)
        horizon_end = splits[first + window_splits + horizon_splits - 1].end
        ds = window_dataset(records, window, horizon_end, index, horizon_splits, inactivity_days, engine)
        return ds, window, horizon_end

    if engine is not None and engine.use_dataflow and not isinstance(records, dataflow.Plan):
        records = dataflow.plan_source(records, name="events")
    train_raw, train_window, train_hend = one(0)
    pool_raw, pool_window, pool_hend = one(1)
    before = {"train": train_raw.class_counts(), "pool": pool_raw.class_counts()}
    for role, ds in (("training", train_raw), ("validation/test", pool_raw)):
        counts = ds.class_counts()
        if min(counts.values()) == 0:
            raise DegenerateSplitError(index, f"{role} set has class counts {counts}")

    train = balance_undersample(train_raw, [seed, 1, index])
    pool = balance_undersample(pool_raw, [seed, 2, index])
    valid, test = split_val_test(pool, [seed, 3, index])
    scaler = Scaler()
    if normalize_counts:
        train, scaler = normalize(train)
        valid, _ = normalize(valid, scaler)
        test, _ = normalize(test, scaler)

    split_len = splits[0].split_length_days
    meta = {
        "split_index": index,
        "split_length_days": split_len,
        "window_splits": window_splits,
        "horizon_splits": horizon_splits,
        "horizon_days": horizon_splits * split_len,
        "periods": periods,
        "inactivity_days": inactivity_days,
        "seed": seed,
        "normalized": normalize_counts,
        "scaler_max_count": scaler.max_count,
        "train_window": [train_window.start, train_window.end],
        "train_horizon": [train_window.end, train_hend],
        "eval_window": [pool_window.start, pool_window.end],
        "eval_horizon": [pool_window.end, pool_hend],
        "class_counts_before": {k: _json_counts(v) for k, v in before.items()},
        "class_counts_after": {
            "train": _json_counts(train.class_counts()),
            "valid": _json_counts(valid.class_counts()),
            "test": _json_counts(test.class_counts()),
        },
    }
    return SplitDatasets(train, valid, test, meta)


def _json_counts(c: dict[int, int]) -> dict[str, int]:
    return {str(k): v for k, v in c.items()}


# ---------------------------------------------------------------- CSV format

def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def write_dataset_csv(path, dataset: LabeledDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", *(f"f{i}" for i in range(dataset.periods)), "label"])
        for uid, row, lab in zip(dataset.user_ids, dataset.X, dataset.y):
            w.writerow([int(uid), *(_fmt(v) for v in row), int(lab)])


def read_dataset_csv(path, split_index: int = 0, horizon_splits: int = 1) -> LabeledDataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if not header or header[0] != "user_id" or header[-1] != "label":
            raise ValueError(f"{path}: not a dataset CSV (header {header!r})")
        periods = len(header) - 2
        ids, rows, ys = [], [], []
        for line_no, rec in enumerate(r, start=2):
            if len(rec) != periods + 2:
                raise ValueError(f"{path}:{line_no}: expected {periods + 2} fields, got {len(rec)}")
            ids.append(int(rec[0]))
            rows.append([float(x) for x in rec[1:-1]])
            ys.append(int(rec[-1]))
    X = np.array(rows, dtype=np.float64).reshape(len(rows), periods)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite feature values")
    return LabeledDataset(np.array(ids), X, np.array(ys), split_index, horizon_splits)


def is_unit_interval(dataset: LabeledDataset) -> bool:
    return bool(dataset.X.size == 0 or (dataset.X.min() >= 0 and dataset.X.max() <= 1))


def split_dir_name(split_index: int, horizon_splits: int) -> str:
    return f"split_{split_index:02d}_h{horizon_splits}"


def write_split_datasets(sd: SplitDatasets, out_dir) -> None:
    """``train.csv``, ``valid.csv``, ``test.csv`` and the ``dataset.json`` sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    for role in ("train", "valid", "test"):
        write_dataset_csv(os.path.join(out_dir, f"{role}.csv"), getattr(sd, role))
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(sd.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split_datasets(path) -> SplitDatasets:
    meta_path = os.path.join(path, "dataset.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    idx, h = meta.get("split_index", 0), meta.get("horizon_splits", 1)
    parts = [read_dataset_csv(os.path.join(path, f"{r}.csv"), idx, h) for r in ("train", "valid", "test")]
    return SplitDatasets(*parts, meta=meta)
