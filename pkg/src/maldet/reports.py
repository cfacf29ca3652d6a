"""Sandbox report ingestion and the canonical labeled dataset CSV.

Reads Cuckoo-style behavioural reports (JSON with a top-level ``behavior``
object holding ``processes[]``, each with ``calls[]`` of ``{"api": name}``),
flattens them into ordered API-call sequences, and round-trips the labeled
dataset through a strict three-column CSV.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    CsvSchemaError,
    DuplicateHash,
    EmptySequence,
    InvalidApiName,
    MalformedJson,
    MissingBehaviorSection,
    UnlabeledSample,
)

log = logging.getLogger(__name__)

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
_API_NAME_RE = re.compile(r"^[A-Za-z0-9_]+$")

CSV_HEADER = "sha256,label,api_sequence"
LABELS_HEADER = "sha256,label"


@dataclass
class ProcessTrace:
    """One traced process: its id and the API names it called, in call order."""
    process_id: int
    calls: list[str]


@dataclass
class BehaviorReport:
    """Parsed behavioural report: sample hash plus per-process call traces."""
    sha256: str
    processes: list[ProcessTrace] = field(default_factory=list)


@dataclass
class LabeledSequence:
    """One executable's flattened API-call sequence with its binary label."""
    sha256: str
    label: int
    calls: list[str]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise CsvSchemaError(f"label must be 0 or 1, got {self.label!r}")


def _valid_api_name(name) -> str:
    if not isinstance(name, str) or not _API_NAME_RE.match(name):
        raise InvalidApiName(f"api name {name!r} violates charset [A-Za-z0-9_]+")
    return name


def parse_report(raw_json: bytes) -> BehaviorReport:
    """Parse one behavioural report from raw bytes.

    Unknown JSON keys are ignored. When ``target.file.sha256`` is absent the
    hash is computed over the raw report bytes and flagged as synthetic in
    the log.
    """
    try:
        doc = json.loads(raw_json.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(f"report is not UTF-8 JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedJson("report top level must be a JSON object")
    if "behavior" not in doc:
        raise MissingBehaviorSection('report has no "behavior" object')
    behavior = doc["behavior"]
    if not isinstance(behavior, dict):
        raise MalformedJson('"behavior" must be a JSON object')

    sha256 = (doc.get("target") or {}).get("file", {}).get("sha256")
    if sha256 is None:
        sha256 = hashlib.sha256(raw_json).hexdigest()
        log.info("report has no target.file.sha256; using synthetic hash %s", sha256)
    elif isinstance(sha256, str):
        sha256 = sha256.lower()
        if not _SHA256_RE.match(sha256):
            raise MalformedJson(f"invalid sha256 {sha256!r}")
    else:
        raise MalformedJson("target.file.sha256 must be a string")

    processes = []
    raw_processes = behavior.get("processes", [])
    if not isinstance(raw_processes, list):
        raise MalformedJson('"behavior.processes" must be an array')
    for index, proc in enumerate(raw_processes):
        if not isinstance(proc, dict):
            raise MalformedJson(f"process entry {index} is not an object")
        pid = proc.get("process_id", index)
        if not isinstance(pid, int):
            raise MalformedJson(f"process_id {pid!r} is not an integer")
        calls = []
        for call in proc.get("calls", []):
            if not isinstance(call, dict) or "api" not in call:
                raise MalformedJson(f"call entry in process {index} lacks an \"api\" field")
            calls.append(_valid_api_name(call["api"]))
        processes.append(ProcessTrace(process_id=pid, calls=calls))
    return BehaviorReport(sha256=sha256, processes=processes)


def extract_sequence(report: BehaviorReport) -> list[str]:
    """Flatten a report into one call sequence, processes in report order.

    Consecutive duplicate calls are kept; nothing is reordered or dropped.
    """
    calls = [name for proc in report.processes for name in proc.calls]
    if not calls:
        raise EmptySequence(f"report {report.sha256} contains no API calls")
    return calls


def read_labels_csv(path: str | Path) -> dict[str, int]:
    """Read the two-column ``sha256,label`` file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LABELS_HEADER:
        raise CsvSchemaError(f"labels file must start with header {LABELS_HEADER!r}")
    labels: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise CsvSchemaError(f"labels line {lineno}: expected 2 columns")
        sha256, label = parts
        if not _SHA256_RE.match(sha256):
            raise CsvSchemaError(f"labels line {lineno}: bad sha256 {sha256!r}")
        if label not in ("0", "1"):
            raise CsvSchemaError(f"labels line {lineno}: label must be 0 or 1")
        labels[sha256] = int(label)
    return labels


def build_dataset(report_dir: str | Path, labels: dict[str, int]) -> list[LabeledSequence]:
    """Parse every ``*.json`` report in a directory into labeled sequences.

    Output is sorted by sha256; duplicate hashes and unlabeled samples are
    rejected. Errors are re-raised with the offending file name attached.
    """
    report_dir = Path(report_dir)
    rows: dict[str, LabeledSequence] = {}
    for path in sorted(report_dir.glob("*.json")):
        try:
            report = parse_report(path.read_bytes())
            calls = extract_sequence(report)
        except Exception as exc:
            raise type(exc)(f"{path.name}: {exc}") from None
        if report.sha256 in rows:
            raise DuplicateHash(f"{path.name}: sha256 {report.sha256} already ingested")
        if report.sha256 not in labels:
            raise UnlabeledSample(f"{path.name}: no label for sha256 {report.sha256}")
        rows[report.sha256] = LabeledSequence(report.sha256, labels[report.sha256], calls)
    return [rows[h] for h in sorted(rows)]


def write_csv(data: list[LabeledSequence], path: str | Path) -> None:
    """Write the dataset CSV: UTF-8, LF endings, space-separated call field."""
    out = [CSV_HEADER]
    for row in data:
        for name in row.calls:
            _valid_api_name(name)
        out.append(f"{row.sha256},{row.label},{' '.join(row.calls)}")
    Path(path).write_bytes(("\n".join(out) + "\n").encode("utf-8"))


def read_csv(path: str | Path) -> list[LabeledSequence]:
    """Read a dataset CSV written by :func:`write_csv` (exact round-trip)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise CsvSchemaError(f"dataset must start with header {CSV_HEADER!r}")
    data = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise CsvSchemaError(f"line {lineno}: expected 3 columns, got {len(parts)}")
        sha256, label, seq = parts
        if not _SHA256_RE.match(sha256):
            raise CsvSchemaError(f"line {lineno}: bad sha256 {sha256!r}")
        if label not in ("0", "1"):
            raise CsvSchemaError(f"line {lineno}: label must be 0 or 1, got {label!r}")
        calls = seq.split(" ") if seq else []
        if not calls:
            raise CsvSchemaError(f"line {lineno}: empty api_sequence")
        for name in calls:
            _valid_api_name(name)
        data.append(LabeledSequence(sha256, int(label), calls))
    return data
