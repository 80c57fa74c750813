"""Scrape (user_id, time, event) tuples from raw-dump JSON-lines files."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

TIME_UNITS = {"s": 1, "ms": 1000}


@dataclass(frozen=True, order=True)
class EventRecord:
    user_id: int
    time: int
    event_name: str


@dataclass
class FileStats:
    path: str
    lines_read: int = 0
    parsed: int = 0
    skipped: int = 0


class IngestError(OSError):
    pass


def is_registered_user(distinct_id) -> bool:
    """Registered users carry purely numerical ids; anonymous ones are alphanumeric."""
    return (
        isinstance(distinct_id, str)
        and distinct_id != ""
        and distinct_id.isascii()
        and distinct_id.isdigit()
    )


def _coerce_time(value, divisor: int) -> int | None:
    # bool is an int subclass; true/false are not timestamps
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    if isinstance(value, float) and not math.isfinite(value):
        return None
    t = int(value / divisor) if divisor != 1 else int(value)
    return t if t > 0 else None


def parse_event_line(line: str, time_unit: str = "s") -> EventRecord | None:
    """Return the record for one raw-dump line, or None if it is unusable.

    Lines without ``properties.distinct_id`` are non-user events, and
    alphanumeric ids belong to unregistered visitors; both yield None, as
    does anything that is not a well-formed event object.
    """
    try:
        obj = json.loads(line)
    except (ValueError, TypeError):
        return None
    if not isinstance(obj, dict):
        return None
    event = obj.get("event")
    props = obj.get("properties")
    if not isinstance(event, str) or not isinstance(props, dict):
        return None
    distinct_id = props.get("distinct_id")
    if not is_registered_user(distinct_id):
        return None
    t = _coerce_time(props.get("time"), TIME_UNITS[time_unit])
    if t is None:
        return None
    return EventRecord(int(distinct_id), t, event)


def iter_dump_paths(paths: Iterable[str]) -> list[str]:
    """Expand directories into their files (sorted by name); keep files as given."""
    out = []
    for p in paths:
        if os.path.isdir(p):
            out.extend(
                os.path.join(p, name)
                for name in sorted(os.listdir(p))
                if os.path.isfile(os.path.join(p, name)) and not name.startswith(".")
                and not name.endswith((".csv", ".json"))
            )
        else:
            out.append(p)
    return out


def scan_raw_dumps(
    paths: Iterable[str],
    time_unit: str = "s",
    stats: list[FileStats] | None = None,
) -> Iterator[EventRecord]:
    """Yield records from each file in order.

    Per-file counters are appended to ``stats`` as files finish, and logged.
    """
    if time_unit not in TIME_UNITS:
        raise ValueError(f"unknown time unit {time_unit!r}; expected one of {sorted(TIME_UNITS)}")
    for path in paths:
        fs = FileStats(path)
        try:
            fh = open(path, encoding="utf-8", errors="replace")
        except OSError as exc:
            raise IngestError(f"cannot read raw dump {path}: {exc.strerror or exc}") from exc
        with fh:
            for line in fh:
                if not line.strip():
                    continue
                fs.lines_read += 1
                rec = parse_event_line(line, time_unit)
                if rec is None:
                    fs.skipped += 1
                else:
                    fs.parsed += 1
                    yield rec
        log.info("%s: read=%d parsed=%d skipped=%d", path, fs.lines_read, fs.parsed, fs.skipped)
        if stats is not None:
            stats.append(fs)


def load_records(paths: Iterable[str], time_unit: str = "s") -> tuple[list[EventRecord], list[FileStats]]:
    stats: list[FileStats] = []
    records = list(scan_raw_dumps(paths, time_unit, stats))
    return records, stats
