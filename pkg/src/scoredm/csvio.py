"""CSV emission with provenance comment headers.

Every file starts with ``#`` comment lines naming the producing command, the
config hash, column units and a creation timestamp; the body that follows is
a plain CSV. Floats are written with ``repr`` so bodies are byte-identical
across reruns with the same config and seeds. The timestamp line is the only
part of a file that changes between reruns.
"""

from __future__ import annotations

import csv
import io
import math
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], command: str = "",
              config_hash: str = "", units: dict[str, str] | None = None,
              timestamp: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if command:
        buf.write(f"# command: {command}\n")
    if config_hash:
        buf.write(f"# config_hash: {config_hash}\n")
    if units:
        buf.write("# units: " + ", ".join(f"{c}={units.get(c, '')}" for c in columns) + "\n")
    if timestamp:
        buf.write(f"# created: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_cell(v) for v in row])
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_csv(path) -> tuple[list[str], list[list[str]], dict[str, str]]:
    """Return ``(columns, rows, meta)``; ``meta`` holds the ``# key: value`` header lines."""
    path = Path(path)
    meta: dict[str, str] = {}
    body = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = val.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no CSV header row")
    reader = csv.reader(body)
    columns = next(reader)
    rows = [r for r in reader]
    for i, r in enumerate(rows):
        if len(r) != len(columns):
            raise ValueError(f"{path}: row {i + 1} has {len(r)} cells, expected {len(columns)}")
    return columns, rows, meta


def csv_body(path) -> str:
    """File contents without comment lines (the part covered by the determinism guarantee)."""
    return "".join(ln + "\n" for ln in Path(path).read_text().splitlines() if not ln.startswith("#"))


def parse_float(cell: str) -> float:
    return float("nan") if cell == "" else float(cell)
