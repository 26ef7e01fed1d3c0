"""Load-trace ingestion and result persistence.

CSV dialect everywhere: comma separated, UTF-8, header on the first row,
``.`` as decimal point.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import EnergyAlphabet, FiniteDistribution
from .errors import ResultIOError, TraceFormatError, ValidationError

log = logging.getLogger(__name__)

_FIXED_COLUMNS = ("kind", "tool_version", "timestamp")
_SECTIONS = ("scenario", "values", "diagnostics")


def read_load_trace(path) -> np.ndarray:
    """Loads from a two-column ``timestamp,load`` CSV file with a header."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc
    loads = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceFormatError(f"{path} is empty")
        if len(header) != 2:
            raise TraceFormatError(f"expected 2 header columns, got {len(header)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceFormatError(f"expected 2 columns, got {len(row)}", line=line)
            try:
                load = float(row[1])
            except ValueError:
                raise TraceFormatError(f"load {row[1]!r} is not a number", line=line) from None
            if not math.isfinite(load) or load < 0:
                raise TraceFormatError(f"load {load} must be finite and non-negative", line=line)
            loads.append(load)
    if not loads:
        raise TraceFormatError(f"{path} has no data rows")
    return np.asarray(loads)


def quantize_loads(loads, quantization_step: float, max_level: Optional[int] = None):
    """Map loads to integer levels by rounding ``load / step`` half to even.

    Returns ``(levels, n_clipped)``.  Levels above ``max_level`` are clipped
    to it; ``max_level=None`` keeps the largest observed level.
    """
    if not quantization_step > 0:
        raise ValidationError(f"quantization step must be positive, got {quantization_step}")
    levels = np.rint(np.asarray(loads, dtype=float) / quantization_step).astype(np.int64)
    if max_level is None:
        return levels, 0
    if max_level < 0:
        raise ValidationError("max_level must be non-negative")
    n_clipped = int(np.count_nonzero(levels > max_level))
    return np.minimum(levels, max_level), n_clipped


def load_trace_csv(path, quantization_step: float, max_level: Optional[int] = None) -> FiniteDistribution:
    """Empirical input-load pmf on ``{0, ..., max_level}`` from a trace file."""
    levels, n_clipped = quantize_loads(read_load_trace(path), quantization_step, max_level)
    if n_clipped:
        log.warning("%s: clipped %d of %d loads to level %d", path, n_clipped, len(levels), max_level)
    top = int(levels.max()) if max_level is None else int(max_level)
    counts = np.bincount(levels, minlength=top + 1)
    return FiniteDistribution.from_counts(EnergyAlphabet.range(top), counts)


@dataclass
class ResultRecord:
    """One persisted result: what was asked, what came out, how it went."""

    kind: str
    scenario: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    tool_version: str = __version__
    timestamp: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
            "scenario": self.scenario,
            "values": self.values,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d) -> "ResultRecord":
        return cls(
            kind=d["kind"],
            scenario=dict(d.get("scenario", {})),
            values=dict(d.get("values", {})),
            diagnostics=dict(d.get("diagnostics", {})),
            tool_version=d.get("tool_version", __version__),
            timestamp=d.get("timestamp"),
        )

    def flat(self) -> dict:
        out = {"kind": self.kind, "tool_version": self.tool_version, "timestamp": self.timestamp}
        for section in _SECTIONS:
            for k, v in getattr(self, section).items():
                out[f"{section}.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, d) -> "ResultRecord":
        rec = cls(kind=d["kind"], tool_version=d["tool_version"], timestamp=d.get("timestamp"))
        for key, v in d.items():
            section, _, name = key.partition(".")
            if name and section in _SECTIONS:
                getattr(rec, section)[name] = v
        return rec


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, two-space indent)."""
    try:
        Path(path).write_text(_dump_json(obj), encoding="utf-8")
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc


def write_results(records, path, format: str = "json") -> None:
    """Persist records as a JSON array or as a flat CSV table.

    CSV columns are ``kind,tool_version,timestamp`` followed by the sorted
    ``scenario.*``, ``values.*`` and ``diagnostics.*`` keys; each cell holds
    the JSON encoding of its value so that reading restores types exactly.
    """
    records = list(records)
    if format == "json":
        write_json([r.to_dict() for r in records], path)
        return
    if format != "csv":
        raise ValidationError(f"unknown result format {format!r}")
    flats = [r.flat() for r in records]
    extra = sorted({k for f in flats for k in f} - set(_FIXED_COLUMNS))
    columns = list(_FIXED_COLUMNS) + extra
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for f in flats:
                w.writerow(["" if c not in f else json.dumps(f[c], sort_keys=True) for c in columns])
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc


def read_results(path, format: str = "json") -> list:
    """Inverse of :func:`write_results`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc
    if format == "json":
        return [ResultRecord.from_dict(d) for d in json.loads(text)]
    if format != "csv":
        raise ValidationError(f"unknown result format {format!r}")
    reader = csv.DictReader(text.splitlines())
    out = []
    for row in reader:
        flat = {k: json.loads(v) for k, v in row.items() if v != ""}
        flat.setdefault("timestamp", None)
        out.append(ResultRecord.from_flat(flat))
    return out


def write_table(rows, path, columns) -> None:
    """Plain numeric CSV with the given header; floats at full precision."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([repr(float(row[c])) for c in columns])
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc


def read_table(path) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    except OSError as exc:
        raise ResultIOError(str(exc), path=path) from exc
