import json

import pytest
from hypothesis import given, strategies as st

from churnnet.ingest import (
    EventRecord,
    FileStats,
    IngestError,
    is_registered_user,
    iter_dump_paths,
    parse_event_line,
    scan_raw_dumps,
)


def line(event="login", **props):
    return json.dumps({"event": event, "properties": props})


def test_parse_valid_line():
    text = '{"event":"login","properties":{"distinct_id":"42","time":1500000000}}'
    assert parse_event_line(text) == EventRecord(42, 1500000000, "login")


def test_missing_distinct_id_is_not_a_user_event():
    assert parse_event_line('{"event":"pageview","properties":{"time":1500000000}}') is None


@pytest.mark.parametrize("text", ["not-json garbage", "", "[1,2]", '"str"', "{", "null"])
def test_garbage_yields_nothing(text):
    assert parse_event_line(text) is None


@pytest.mark.parametrize(
    "distinct_id, expected",
    [("12345", True), ("a9f3-cookie-77", False), ("", False), ("007", True), ("12 3", False),
     ("²", False), ("٣", False), (None, False), (12, False)],
)
def test_is_registered_user(distinct_id, expected):
    assert is_registered_user(distinct_id) is expected


def test_time_variants():
    assert parse_event_line(line(distinct_id="1", time=1500000000.9)).time == 1500000000
    assert parse_event_line(line(distinct_id="1", time=0)) is None
    assert parse_event_line(line(distinct_id="1", time=-5)) is None
    assert parse_event_line(line(distinct_id="1", time="1500000000")) is None
    assert parse_event_line(line(distinct_id="1", time=True)) is None
    assert parse_event_line(line(distinct_id="1")) is None
    ms = parse_event_line(line(distinct_id="1", time=1500000000123), time_unit="ms")
    assert ms.time == 1500000000


def test_leading_zeros_and_extra_keys():
    rec = parse_event_line(line(distinct_id="0042", time=1500000000, browser="x", plan={"a": 1}))
    assert rec == EventRecord(42, 1500000000, "login")


def test_non_string_event_or_properties():
    assert parse_event_line(json.dumps({"event": 3, "properties": {"distinct_id": "1", "time": 5}})) is None
    assert parse_event_line(json.dumps({"event": "x", "properties": []})) is None


@given(st.text())
def test_parse_is_pure_and_never_raises(text):
    assert parse_event_line(text) == parse_event_line(text)


@given(st.text(alphabet="0123456789abcdef-", max_size=12), st.integers(1, 2**40))
def test_emitted_records_are_registered(did, t):
    rec = parse_event_line(line(distinct_id=did, time=t))
    assert (rec is not None) == is_registered_user(did)
    if rec is not None:
        assert rec.user_id == int(did) and rec.time == t


def test_scan_empty():
    assert list(scan_raw_dumps([])) == []


def test_scan_counts_and_order(write_lines):
    # 3 valid + 2 invalid lines, counted by hand
    f1 = write_lines("a.jsonl", [
        line(distinct_id="1", time=100),
        "garbage",
        line(distinct_id="cookie-1", time=101),
        line(distinct_id="2", time=102),
        line(distinct_id="3", time=103),
    ])
    f2 = write_lines("b.jsonl", [line(distinct_id="9", time=50)])
    stats: list[FileStats] = []
    recs = list(scan_raw_dumps([f1, f2], stats=stats))
    assert [r.user_id for r in recs] == [1, 2, 3, 9]
    assert (stats[0].lines_read, stats[0].parsed, stats[0].skipped) == (5, 3, 2)
    assert (stats[1].lines_read, stats[1].parsed, stats[1].skipped) == (1, 1, 0)
    for s in stats:
        assert s.lines_read == s.parsed + s.skipped


def test_unreadable_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.jsonl")
    with pytest.raises(IngestError, match="nope.jsonl"):
        list(scan_raw_dumps([missing]))


def test_bad_time_unit():
    with pytest.raises(ValueError):
        list(scan_raw_dumps([], time_unit="h"))


def test_iter_dump_paths_expands_directories(tmp_path):
    (tmp_path / "raw-dump-2.jsonl").write_text("")
    (tmp_path / "raw-dump-1.jsonl").write_text("")
    (tmp_path / "ground_truth.csv").write_text("")
    (tmp_path / "manifest.json").write_text("")
    got = iter_dump_paths([str(tmp_path)])
    assert [p.rsplit("/", 1)[1] for p in got] == ["raw-dump-1.jsonl", "raw-dump-2.jsonl"]
