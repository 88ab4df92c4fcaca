"""Line-delimited JSON record IO with strict float handling.

Floats serialize through Python's shortest round-trip repr, so a
write/read cycle reproduces every finite value bit-exactly.  NaN and
Infinity are rejected on both sides.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import DataError, ParseError


def _reject_constant(token: str) -> float:
    raise ValueError(f"non-finite JSON constant {token!r}")


def dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, allow_nan=False)


def iter_records(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line_number, record) pairs; line numbers are 1-based.

    Blank lines are skipped. Malformed JSON or a non-object line raises
    ParseError naming the offending line.
    """
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if not isinstance(record, dict):
                raise ParseError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, record


def read_records(path: str | Path) -> list[dict[str, Any]]:
    return [record for _, record in iter_records(path)]


def write_records(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """Write one record per line; returns the number of lines written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps(record))
            fh.write("\n")
            count += 1
    return count


def append_record(path: str | Path, record: dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(dumps(record))
        fh.write("\n")


def as_float_vector(value: Any, context: str) -> list[float]:
    """Validate a JSON array as a finite real vector."""
    if not isinstance(value, list) or not value:
        raise DataError(f"{context}: expected a non-empty numeric array")
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise DataError(f"{context}: non-numeric component {x!r}")
        x = float(x)
        if not math.isfinite(x):
            raise DataError(f"{context}: non-finite component")
        out.append(x)
    return out
