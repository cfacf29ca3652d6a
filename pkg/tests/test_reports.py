"""Report parsing, sequence extraction, and dataset CSV round-trips."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maldet.errors import (
    CsvSchemaError,
    DuplicateHash,
    EmptySequence,
    InvalidApiName,
    MalformedJson,
    MissingBehaviorSection,
    UnlabeledSample,
)
from maldet.reports import (
    BehaviorReport,
    LabeledSequence,
    ProcessTrace,
    build_dataset,
    extract_sequence,
    parse_report,
    read_csv,
    read_labels_csv,
    write_csv,
)

HASH_A = "ab" * 32
HASH_B = "cd" * 32
HASH_C = "ef" * 32


def report_bytes(sha256=HASH_A, processes=None):
    doc = {"behavior": {"processes": processes if processes is not None else []}}
    if sha256 is not None:
        doc["target"] = {"file": {"sha256": sha256}}
    return json.dumps(doc).encode()


def proc(calls, pid=1):
    return {"process_id": pid, "calls": [{"api": c, "time": 0.1} for c in calls]}


# ---------------------------------------------------------------------------
# parse_report
# ---------------------------------------------------------------------------

def test_parse_basic_report():
    raw = report_bytes(processes=[proc(["NtOpenProcess", "CreateFileW"])])
    rep = parse_report(raw)
    assert rep.sha256 == HASH_A
    assert len(rep.processes) == 1
    assert rep.processes[0].calls == ["NtOpenProcess", "CreateFileW"]


def test_parse_empty_processes_is_fine():
    rep = parse_report(report_bytes(processes=[]))
    assert rep.processes == []


def test_parse_preserves_process_order():
    raw = report_bytes(processes=[proc(["LdrLoadDll"], pid=1),
                                  proc(["RegCreateKeyExW"], pid=2)])
    rep = parse_report(raw)
    assert extract_sequence(rep) == ["LdrLoadDll", "RegCreateKeyExW"]


def test_parse_ignores_unknown_keys():
    doc = {"info": {"id": 1}, "behavior": {"processes": [], "summary": {}},
           "target": {"file": {"sha256": HASH_A, "name": "x.exe"}}, "extra": 7}
    rep = parse_report(json.dumps(doc).encode())
    assert rep.sha256 == HASH_A


def test_parse_synthetic_hash_when_absent(caplog):
    raw = report_bytes(sha256=None, processes=[proc(["A"])])
    with caplog.at_level("INFO"):
        rep = parse_report(raw)
    assert len(rep.sha256) == 64
    assert int(rep.sha256, 16) >= 0
    assert "synthetic" in caplog.text


def test_parse_uppercase_hash_normalized():
    rep = parse_report(report_bytes(sha256=HASH_A.upper()))
    assert rep.sha256 == HASH_A


def test_parse_error_paths():
    with pytest.raises(MalformedJson):
        parse_report(b"{not json")
    with pytest.raises(MalformedJson):
        parse_report(b"\xff\xfe")
    with pytest.raises(MissingBehaviorSection):
        parse_report(json.dumps({"target": {}}).encode())
    with pytest.raises(InvalidApiName):
        parse_report(report_bytes(processes=[proc(["bad name"])]))
    with pytest.raises(MalformedJson):
        parse_report(report_bytes(sha256="zz" * 32))
    with pytest.raises(MalformedJson):
        parse_report(report_bytes(processes=[{"calls": [{"notapi": 1}]}]))


# ---------------------------------------------------------------------------
# extract_sequence
# ---------------------------------------------------------------------------

def test_extract_concatenates_processes():
    rep = BehaviorReport(HASH_A, [ProcessTrace(1, ["A", "B"]), ProcessTrace(2, ["C"])])
    assert extract_sequence(rep) == ["A", "B", "C"]


def test_extract_keeps_consecutive_duplicates():
    rep = BehaviorReport(HASH_A, [ProcessTrace(1, ["A", "A", "B"])])
    assert extract_sequence(rep) == ["A", "A", "B"]


def test_extract_empty_raises():
    rep = BehaviorReport(HASH_A, [ProcessTrace(1, [])])
    with pytest.raises(EmptySequence):
        extract_sequence(rep)


# ---------------------------------------------------------------------------
# build_dataset
# ---------------------------------------------------------------------------

def write_report(directory, name, sha256, calls):
    (directory / name).write_bytes(report_bytes(sha256=sha256, processes=[proc(calls)]))


def test_build_dataset_sorted_by_hash(tmp_path):
    write_report(tmp_path, "r1.json", HASH_C, ["C1"])
    write_report(tmp_path, "r2.json", HASH_A, ["A1"])
    write_report(tmp_path, "r3.json", HASH_B, ["B1"])
    labels = {HASH_A: 0, HASH_B: 1, HASH_C: 1}
    data = build_dataset(tmp_path, labels)
    assert [d.sha256 for d in data] == sorted([HASH_A, HASH_B, HASH_C])
    assert [d.label for d in data] == [0, 1, 1]


def test_build_dataset_unlabeled(tmp_path):
    write_report(tmp_path, "r1.json", HASH_A, ["A"])
    with pytest.raises(UnlabeledSample, match="r1.json"):
        build_dataset(tmp_path, {})


def test_build_dataset_duplicate_hash(tmp_path):
    write_report(tmp_path, "r1.json", HASH_A, ["A"])
    write_report(tmp_path, "r2.json", HASH_A, ["B"])
    with pytest.raises(DuplicateHash):
        build_dataset(tmp_path, {HASH_A: 1})


def test_build_dataset_deterministic_csv(tmp_path):
    write_report(tmp_path, "z.json", HASH_B, ["X", "Y"])
    write_report(tmp_path, "a.json", HASH_A, ["Z"])
    labels = {HASH_A: 0, HASH_B: 1}
    out1, out2 = tmp_path / "d1.csv", tmp_path / "d2.csv"
    write_csv(build_dataset(tmp_path, labels), out1)
    write_csv(build_dataset(tmp_path, labels), out2)
    assert out1.read_bytes() == out2.read_bytes()


# ---------------------------------------------------------------------------
# csv round-trip
# ---------------------------------------------------------------------------

def test_csv_exact_format(tmp_path):
    path = tmp_path / "d.csv"
    write_csv([LabeledSequence(HASH_A, 1, ["NtOpenProcess", "CreateFileW"])], path)
    assert path.read_bytes() == (
        b"sha256,label,api_sequence\n" + HASH_A.encode() + b",1,NtOpenProcess CreateFileW\n"
    )


def test_csv_empty_dataset(tmp_path):
    path = tmp_path / "d.csv"
    write_csv([], path)
    assert path.read_bytes() == b"sha256,label,api_sequence\n"
    assert read_csv(path) == []


def test_csv_rejects_bad_rows(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("sha256,label,api_sequence\n" + HASH_A + ",2,A B\n")
    with pytest.raises(CsvSchemaError):
        read_csv(path)
    path.write_text("wrong,header\n")
    with pytest.raises(CsvSchemaError):
        read_csv(path)
    path.write_text("sha256,label,api_sequence\n" + HASH_A + ",1\n")
    with pytest.raises(CsvSchemaError):
        read_csv(path)
    path.write_text("sha256,label,api_sequence\n" + HASH_A + ",1,\n")
    with pytest.raises(CsvSchemaError):
        read_csv(path)


def test_labels_csv(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text(f"sha256,label\n{HASH_A},1\n{HASH_B},0\n")
    assert read_labels_csv(path) == {HASH_A: 1, HASH_B: 0}
    path.write_text("nope\n")
    with pytest.raises(CsvSchemaError):
        read_labels_csv(path)


api_names = st.text(
    alphabet="ABCdefgh123_", min_size=1, max_size=12,
)
hashes = st.text(alphabet="0123456789abcdef", min_size=64, max_size=64)


@st.composite
def datasets(draw):
    n = draw(st.integers(min_value=0, max_value=6))
    seen = set()
    rows = []
    for _ in range(n):
        h = draw(hashes.filter(lambda x: x not in seen))
        seen.add(h)
        calls = draw(st.lists(api_names, min_size=1, max_size=8))
        rows.append(LabeledSequence(h, draw(st.sampled_from([0, 1])), calls))
    return rows


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_csv_roundtrip_property(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    write_csv(rows, path)
    back = read_csv(path)
    assert back == rows
    # second write is byte-identical
    path2 = path.with_suffix(".again")
    write_csv(back, path2)
    assert path.read_bytes() == path2.read_bytes()
