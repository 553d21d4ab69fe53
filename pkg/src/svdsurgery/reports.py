"""Deterministic report writers.

Same inputs always produce the same bytes: floats are written with repr
(shortest round-trip form), JSON keys are sorted, and nothing carries a
timestamp unless the caller injects one.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import WriteError


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_csv(path: str | Path, header: list[str], rows: list[tuple]) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    lines.extend(",".join(fmt(cell) for cell in row) for row in rows)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
    return path


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
    return path
