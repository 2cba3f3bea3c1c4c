"""Structured metric files: csv and json-lines with lossless round trips."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Optional, Sequence

FORMATS = ("csv", "jsonlines")


def _columns(records: Sequence[dict], columns: Optional[Sequence[str]]) -> list[str]:
    cols = list(columns) if columns is not None else (list(records[0]) if records else [])
    for i, r in enumerate(records):
        if set(r) != set(cols):
            raise ValueError(f"record {i} keys {sorted(r)} differ from schema {sorted(cols)}")
    return cols


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def format_metrics(records: Sequence[dict], fmt: str = "csv", columns: Optional[Sequence[str]] = None) -> str:
    if fmt not in FORMATS:
        raise ValueError(f"unknown metrics format {fmt!r}")
    cols = _columns(records, columns)
    if fmt == "jsonlines":
        return "".join(json.dumps({c: r[c] for c in cols}) + "\n" for r in records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if cols:
        w.writerow(cols)
    for r in records:
        w.writerow([_cell(r[c]) for c in cols])
    return buf.getvalue()


def emit_metrics(records: Sequence[dict], fmt: str, path, columns: Optional[Sequence[str]] = None) -> Path:
    """Write records with a stable column order (first record's key order unless ``columns`` given).

    Floats are written with ``repr`` so they parse back to the identical value.
    """
    path = Path(path)
    path.write_text(format_metrics(records, fmt, columns))
    return path


def parse_metrics(text: str, fmt: str = "csv") -> list[dict]:
    if fmt == "jsonlines":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    if fmt != "csv":
        raise ValueError(f"unknown metrics format {fmt!r}")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    head = rows[0]
    return [{k: _parse_cell(v) for k, v in zip(head, row)} for row in rows[1:]]


def read_metrics(path, fmt: Optional[str] = None) -> list[dict]:
    path = Path(path)
    fmt = fmt or ("jsonlines" if path.suffix in (".jsonl", ".jsonlines") else "csv")
    return parse_metrics(path.read_text(), fmt)


def format_table(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    """Fixed-width plain-text table for terminal output."""
    if not rows:
        return ""
    cols = list(columns or rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}" if abs(v) < 1e4 or math.isnan(v) else f"{v:,.0f}"
        return str(v)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def ratio_records(ratios, labels: Sequence[str]) -> list[dict]:
    """Flatten an (L, C, K) selection-ratio array into one record per (cell, connection)."""
    out = []
    for l, cell in enumerate(ratios):
        for c, row in enumerate(cell):
            rec = {"cell": l, "connection": c}
            rec.update({lab: float(v) for lab, v in zip(labels, row)})
            out.append(rec)
    return out
