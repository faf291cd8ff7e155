"""CSV helpers.  Every file starts with a ``# isorobust-schema`` line, then a header row."""

from __future__ import annotations

import contextlib
import csv
import io
import sys
from pathlib import Path

SCHEMA_VERSION = 1


def schema_line(name: str, **extra) -> str:
    parts = [f"# isorobust-schema: {name} v{SCHEMA_VERSION}"]
    parts += [f"{k}={v}" for k, v in sorted(extra.items())]
    return "; ".join(parts) + "\n"


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@contextlib.contextmanager
def open_output(path):
    """Text handle for ``path``; ``"-"`` is standard output."""
    if str(path) == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def write_csv(path, name: str, columns: list[str], rows, **extra) -> None:
    with open_output(path) as fh:
        fh.write(schema_line(name, **extra))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            w.writerow([fmt(v) for v in row])


def read_schema(path) -> tuple[str, int]:
    first = Path(path).read_text().splitlines()[0]
    if not first.startswith("# isorobust-schema: "):
        raise ValueError(f"{path}: missing schema line")
    head = first[len("# isorobust-schema: "):].split(";")[0].strip()
    name, version = head.rsplit(" v", 1)
    return name, int(version)


def read_csv_rows(path) -> list[dict]:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines) + "\n")))
