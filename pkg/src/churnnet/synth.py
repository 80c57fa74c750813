"""Synthetic raw-dump event logs with known churn behavior.

Two regimes:

``subscription``
    Users emit events at a steady, user-specific daily rate and are never
    silent for more than a week while active. Churners' rates decay over
    their final weeks and then stop for good. Recent activity therefore
    separates the classes well.

``nonsubscription``
    Users appear in short bursts separated by long, memoryless gaps,
    whether or not they eventually churn. The window history says little
    about whether the next burst lands inside the horizon.

A few unregistered visitors (alphanumeric ids) and non-user events are mixed
in to exercise the ingest filters.
"""

from __future__ import annotations

import csv
import json
import os
import time as _time
from dataclasses import asdict, dataclass

import numpy as np

from .features import DAY, LabeledDataset, split_val_test
from .network import softmax

REGIMES = ("subscription", "nonsubscription")
EVENT_NAMES = ("login", "pageview", "search", "message", "purchase")
DEFAULT_ORIGIN = 1_499_990_400  # 2017-07-14 00:00:00 UTC
MAX_QUIET_DAYS = 7


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    days: int = 150
    churn_fraction: float = 0.4
    regime: str = "subscription"
    base_rate: float = 2.0
    decay: float = 0.85
    decay_days: int = 21
    burst_gap_days: float = 10.0
    unregistered_fraction: float = 0.05
    nonuser_fraction: float = 0.01
    origin: int = DEFAULT_ORIGIN
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_users < 0:
            problems.append("n_users must be >= 0")
        if self.days < 1:
            problems.append("days must be >= 1")
        if not 0 < self.churn_fraction < 1:
            problems.append("churn_fraction must lie in (0, 1)")
        if self.regime not in REGIMES:
            problems.append(f"regime must be one of {REGIMES}")
        if self.base_rate <= 0:
            problems.append("base_rate must be positive")
        if not 0 < self.decay < 1:
            problems.append("decay must lie in (0, 1)")
        if self.decay_days < 1 or self.burst_gap_days <= 0:
            problems.append("decay_days and burst_gap_days must be positive")
        if not 0 <= self.unregistered_fraction < 1 or not 0 <= self.nonuser_fraction < 1:
            problems.append("noise fractions must lie in [0, 1)")
        if self.origin <= 0:
            problems.append("origin must be a positive unix time")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def end(self) -> int:
        return self.origin + self.days * DAY


@dataclass
class UserTruth:
    user_id: int
    churner: bool
    start_time: int
    stop_time: int | None
    first_event: int | None
    last_event: int | None
    n_events: int

    def label_at(self, horizon_end: int, inactivity_days: int = 30) -> int:
        """Churn label implied by this user's generated timeline for a horizon ending at ``horizon_end``.

        Valid for users that have events inside the window and pass the
        new-user filter. Active subscription users are never quiet for more
        than a week, so "last event anywhere before the cutoff" decides it.
        """
        return int(horizon_end - self.last_event > inactivity_days * DAY)


@dataclass
class SyntheticLog:
    config: SynthConfig
    events: list[tuple[int, str, str]]  # (time, distinct_id or "", event), time-sorted
    truth: list[UserTruth]

    def lines(self) -> list[str]:
        return [_line(t, d, e) for t, d, e in self.events]


def _line(t: int, distinct_id: str, event: str) -> str:
    props = {"time": t}
    if distinct_id:
        props["distinct_id"] = distinct_id
    props["mp_lib"] = "web"
    return json.dumps({"event": event, "properties": props}, separators=(",", ":"))


def _subscription_days(rng, cfg: SynthConfig, start_day: int, stop_day: int, churner: bool):
    rate = cfg.base_rate * rng.lognormal(0.0, 0.5)
    days = np.arange(start_day, stop_day)
    mult = np.ones(len(days))
    if churner:
        into = days - (stop_day - cfg.decay_days)
        mult = np.where(into >= 0, cfg.decay ** np.maximum(into, 0), 1.0)
    counts = rng.poisson(rate * mult)
    quiet = 0
    for i in range(len(counts)):
        if counts[i] == 0:
            quiet += 1
            if quiet >= MAX_QUIET_DAYS:
                counts[i] = 1
                quiet = 0
        else:
            quiet = 0
    return days, counts


def _nonsubscription_days(rng, cfg: SynthConfig, start_day: int, stop_day: int):
    day_counts: dict[int, int] = {}
    # stationary arrivals: no burst pinned to the start day
    d = start_day + rng.exponential(cfg.burst_gap_days)
    while d < stop_day:
        size = 1 + rng.poisson(cfg.base_rate * 3)
        day_counts[int(d)] = day_counts.get(int(d), 0) + int(size)
        d += rng.exponential(cfg.burst_gap_days)
    days = np.array(sorted(day_counts), dtype=np.int64)
    return days, np.array([day_counts[x] for x in days], dtype=np.int64)


def generate_log(config: SynthConfig) -> SyntheticLog:
    """Generate events and per-user ground truth. Deterministic in ``config``.

    User ``i`` draws from ``default_rng([seed, 1, i])`` so each user's
    timeline is independent of the others.
    """
    cfg = config
    master = np.random.default_rng([cfg.seed, 0])
    n_churn = int(round(cfg.churn_fraction * cfg.n_users))
    if cfg.n_users > 0 and (n_churn == 0 or n_churn == cfg.n_users):
        raise ValueError(
            f"{cfg.n_users} users at churn_fraction {cfg.churn_fraction} gives "
            f"{n_churn} churners and {cfg.n_users - n_churn} retained users; need both"
        )
    ids = np.sort(master.choice(np.arange(100_000, 1_000_000), size=cfg.n_users, replace=False))
    churners = np.zeros(cfg.n_users, dtype=bool)
    churners[master.permutation(cfg.n_users)[:n_churn]] = True
    events: list[tuple[int, str, str]] = []
    truth: list[UserTruth] = []
    for i, (uid, churner) in enumerate(zip(ids.tolist(), churners.tolist())):
        rng = np.random.default_rng([cfg.seed, 1, i])
        # most users predate the log; the rest sign up later
        start_day = 0 if rng.random() < 0.6 else int(rng.integers(0, cfg.days))
        stop_day = cfg.days
        if churner:
            lo = min(start_day + 35, cfg.days)
            stop_day = int(rng.integers(lo, cfg.days + 1)) if lo < cfg.days else cfg.days
        if cfg.regime == "subscription":
            days, counts = _subscription_days(rng, cfg, start_day, stop_day, churner)
        else:
            days, counts = _nonsubscription_days(rng, cfg, start_day, stop_day)
        times: list[int] = []
        for d, k in zip(days.tolist(), counts.tolist()):
            if k:
                secs = np.sort(rng.integers(0, DAY, size=k))
                times.extend(cfg.origin + d * DAY + int(s) for s in secs)
        names = rng.integers(0, len(EVENT_NAMES), size=len(times))
        did = str(uid)
        events.extend((t, did, EVENT_NAMES[j]) for t, j in zip(times, names.tolist()))
        truth.append(UserTruth(
            uid, bool(churner), cfg.origin + start_day * DAY,
            cfg.origin + stop_day * DAY if churner else None,
            times[0] if times else None, times[-1] if times else None, len(times),
        ))
    n_events = len(events)
    noise = np.random.default_rng([cfg.seed, 2])
    n_anon = int(round(n_events * cfg.unregistered_fraction))
    n_nonuser = int(round(n_events * cfg.nonuser_fraction))
    span = cfg.days * DAY
    for _ in range(n_anon):
        anon = "%08x-%04x-cookie" % (noise.integers(0, 2**32), noise.integers(0, 2**16))
        events.append((cfg.origin + int(noise.integers(0, span)), anon, "pageview"))
    for _ in range(n_nonuser):
        events.append((cfg.origin + int(noise.integers(0, span)), "", "$cron_tick"))
    events.sort()
    return SyntheticLog(cfg, events, truth)


def write_raw_dumps(log: SyntheticLog, out_dir) -> list[str]:
    """One ``raw-dump-YYYY-MM-DD.jsonl`` file per day, plus ``ground_truth.csv`` and ``synth.json``."""
    os.makedirs(out_dir, exist_ok=True)
    by_day: dict[int, list[str]] = {}
    for t, d, e in log.events:
        by_day.setdefault((t - log.config.origin) // DAY, []).append(_line(t, d, e))
    paths = []
    for day in range(log.config.days):
        stamp = _time.strftime("%Y-%m-%d", _time.gmtime(log.config.origin + day * DAY))
        path = os.path.join(out_dir, f"raw-dump-{stamp}.jsonl")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in by_day.get(day, ()):
                fh.write(line + "\n")
        paths.append(path)
    write_ground_truth(log.truth, os.path.join(out_dir, "ground_truth.csv"))
    with open(os.path.join(out_dir, "synth.json"), "w") as fh:
        json.dump({"config": asdict(log.config), "start": log.config.origin, "end": log.config.end}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


TRUTH_COLUMNS = ["user_id", "churner", "start_time", "stop_time", "first_event", "last_event", "n_events"]


def _cell(v) -> str:
    if v is None:
        return ""
    return str(int(v))


def write_ground_truth(truth: list[UserTruth], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for u in truth:
            w.writerow([_cell(getattr(u, c)) for c in TRUTH_COLUMNS])


def read_ground_truth(path) -> dict[int, UserTruth]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            opt = {k: (int(row[k]) if row[k] else None) for k in ("stop_time", "first_event", "last_event")}
            u = UserTruth(int(row["user_id"]), row["churner"] == "1", int(row["start_time"]),
                          n_events=int(row["n_events"]), **opt)
            out[u.user_id] = u
    return out


# ---------------------------------------------------------------- separability probe

def _fit_softmax(X, y, epochs: int = 300, lr: float = 0.5, l2: float = 1e-3):
    W = np.zeros((X.shape[1], 2))
    b = np.zeros(2)
    onehot = np.eye(2)[y]
    for _ in range(epochs):
        p = softmax(X @ W + b)
        d = (p - onehot) / len(y)
        W -= lr * (X.T @ d + l2 * W)
        b -= lr * d.sum(axis=0)
    return W, b


def balanced_accuracy(pred, y) -> float:
    recalls = [np.mean(pred[y == c] == c) for c in (0, 1) if np.any(y == c)]
    return float(np.mean(recalls))


def verify_separability(
    dataset: LabeledDataset, test: LabeledDataset | None = None, seed: int = 0
) -> float:
    """Balanced test accuracy of a linear softmax classifier (no hidden layers).

    Without ``test``, ``dataset`` is split 50/50. Features are standardized
    with training statistics; that changes optimization, not what a linear
    model can express.
    """
    if test is None:
        dataset, test = split_val_test(dataset, [seed, 9])
    mu = dataset.X.mean(axis=0)
    sd = dataset.X.std(axis=0)
    sd[sd == 0] = 1.0
    W, b = _fit_softmax((dataset.X - mu) / sd, dataset.y)
    pred = np.argmax((test.X - mu) / sd @ W + b, axis=1)
    return balanced_accuracy(pred, test.y)
