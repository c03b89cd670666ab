"""Deterministic CSV container with exact render/parse round-tripping.

Cells are stored as strings; floats are formatted with repr (shortest
round-trip form) at append time, so parse(render(log)) == log and repeated
renders are byte-identical.  Commas, newlines and NaN cells are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def format_cell(value) -> str:
    if isinstance(value, str):
        text = value
    elif isinstance(value, (bool, np.bool_)):
        raise ValueError("boolean cells are ambiguous; use explicit strings")
    elif isinstance(value, (int, np.integer)):
        text = str(int(value))
    elif isinstance(value, (float, np.floating)):
        f = float(value)
        if not math.isfinite(f):
            raise ValueError("non-finite values cannot be logged; write a status row instead")
        text = repr(f)
    else:
        raise ValueError(f"unsupported cell type {type(value).__name__}")
    if "," in text or "\n" in text or "\r" in text:
        raise ValueError(f"cell {text!r} contains a delimiter")
    return text


@dataclass
class CsvLog:
    header: list[str]
    rows: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.header:
            raise ValueError("header must not be empty")
        self.header = [format_cell(h) for h in self.header]

    def append(self, values) -> None:
        row = [format_cell(v) for v in values]
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} cells, header has {len(self.header)}")
        self.rows.append(row)

    def render(self) -> str:
        lines = [",".join(self.header)]
        lines.extend(",".join(row) for row in self.rows)
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "CsvLog":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ValueError("empty CSV text")
        log = cls(header=lines[0].split(","))
        for line in lines[1:]:
            log.append(line.split(","))
        return log

    def write(self, path) -> None:
        Path(path).write_text(self.render())

    @classmethod
    def read(cls, path) -> "CsvLog":
        return cls.parse(Path(path).read_text())

    def column(self, name: str) -> list[str]:
        try:
            i = self.header.index(name)
        except ValueError:
            raise KeyError(f"no column {name!r} in header {self.header}") from None
        return [row[i] for row in self.rows]

    def float_column(self, name: str) -> np.ndarray:
        return np.asarray([float(v) for v in self.column(name)], dtype=np.float64)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CsvLog) and self.header == other.header and self.rows == other.rows
        )
