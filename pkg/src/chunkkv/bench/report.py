"""CSV / JSON-lines / aligned-table output with a fixed column order."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

FORMATS = ("csv", "jsonl", "table")


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def render(rows: Sequence[dict], fmt: str = "csv", columns: Sequence[str] | None = None) -> str:
    """Serialize rows; ``columns`` fixes order (defaults to the first row's keys)."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    if fmt == "jsonl":
        return "".join(json.dumps({c: r.get(c) for c in cols}) + "\n" for r in rows)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt_cell(r.get(c, "")) for c in cols])
        return buf.getvalue()
    cells = [[_table_cell(r.get(c, "")) for c in cols] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def _table_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}" if abs(value) < 1e4 else f"{value:.1f}"
    return str(value)


def report(rows: Sequence[dict], fmt: str = "csv", out: str | Path | None = None, columns: Sequence[str] | None = None) -> str:
    """Render rows and, if ``out`` is given, write them there."""
    text = render(rows, fmt, columns)
    if out is not None:
        Path(out).write_text(text)
    return text


def _coerce(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw in ("True", "False"):
        return raw == "True"
    return raw


def parse(text: str, fmt: str = "csv") -> list[dict]:
    """Inverse of :func:`render` for csv and jsonl."""
    if fmt == "jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        return [{k: _coerce(v) for k, v in row.items()} for row in reader]
    raise ValueError(f"cannot parse format {fmt!r}")


def records(items: Iterable) -> list[dict]:
    return [it.record() if hasattr(it, "record") else dict(it) for it in items]
