"""Strict CSV reading/writing shared by every on-disk table."""

from __future__ import annotations

import csv
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path


class ParseError(ValueError):
    """Malformed input table; carries the file and 1-based line number."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def read_table(path, header: Sequence[str], optional: Sequence[str] = ()) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, row_dict)`` for each data row.

    The header must start with ``header``; trailing ``optional`` columns may
    be present or absent, but every row must have as many fields as the
    header line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            found = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file, expected a header") from None
        found = [h.strip() for h in found]
        allowed = list(header) + list(optional)
        if found[: len(header)] != list(header) or found != allowed[: len(found)]:
            raise ParseError(path, 1, f"expected header {','.join(header)}, got {','.join(found)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(found):
                raise ParseError(path, line, f"expected {len(found)} fields, got {len(row)}")
            yield line, {k: v.strip() for k, v in zip(found, row)}


def parse_float(path, line: int, value: str, name: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(path, line, f"{name}={value!r} is not a number") from None


def parse_int(path, line: int, value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(path, line, f"{name}={value!r} is not an integer") from None


def parse_bool(path, line: int, value: str, name: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise ParseError(path, line, f"{name}={value!r} is not a boolean")


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def fmt(v: float) -> str:
    """Coordinates are stored with two decimals."""
    return f"{v:.2f}"
