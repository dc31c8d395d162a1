"""Strict readers for the simulator's CSV artifacts.

The simulator writes CSVs with fixed headers; this side refuses anything
that does not match exactly, naming both the expected and the found
columns.  Cells are kept as the strings on disk, so writing a table back
out reproduces the input byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

UTILIZATION_COLUMNS = ("time_ns", "link_id", "direction", "utilization")
OCCUPANCY_COLUMNS = ("time_ns", "switch", "port_gpu", "live_sessions")
SPREAD_COLUMNS = ("addr", "kind", "first_ns", "last_ns", "spread_ns", "requesters")
GROUP_TIMELINE_COLUMNS = ("group", "phase", "first_register_ns", "last_register_ns",
                          "release_ns")

SCHEMAS = {
    "utilization": UTILIZATION_COLUMNS,
    "occupancy": OCCUPANCY_COLUMNS,
    "spreads": SPREAD_COLUMNS,
    "group_timeline": GROUP_TIMELINE_COLUMNS,
}


class SchemaError(ValueError):
    def __init__(self, path, expected, found):
        self.path = path
        self.expected = tuple(expected)
        self.found = tuple(found) if found is not None else None
        super().__init__(
            f"{path}: expected columns {list(self.expected)}, "
            f"found {list(self.found) if self.found is not None else 'no header'}")


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def column(self, name: str) -> list[str]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def floats(self, name: str) -> list[float]:
        return [float(v) for v in self.column(name)]

    def ints(self, name: str) -> list[int]:
        return [int(v) for v in self.column(name)]


def read_table(path, expected: tuple[str, ...]) -> Table:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(path, expected, None) from None
        if tuple(header) != expected:
            raise SchemaError(path, expected, header)
        rows = []
        for row in reader:
            if len(row) != len(expected):
                raise SchemaError(path, expected, row)
            rows.append(tuple(row))
    return Table(expected, tuple(rows))


def write_table(path, table: Table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table.columns)
        w.writerows(table.rows)


def read_summary(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise SchemaError(path, ("<json object>",), (type(data).__name__,))
    for key in ("mode", "makespan_ns", "entries_per_port"):
        if key not in data:
            raise SchemaError(path, (key,), tuple(sorted(data))[:8])
    return data
