"""Event log shared by endpoints and the simulator, written out as CSV."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Union

TRACE_COLUMNS = ("virtual_time_us", "entity", "event_kind", "detail")


class TraceRow(NamedTuple):
    time: int
    entity: str
    kind: str
    detail: str = ""


def format_detail(**fields: object) -> str:
    """``key=value`` pairs joined by spaces, in argument order."""
    return " ".join(f"{k}={v}" for k, v in fields.items())


def parse_detail(detail: str) -> dict[str, str]:
    out = {}
    for part in detail.split():
        key, _, value = part.partition("=")
        out[key] = value
    return out


class Trace:
    """Append-only list of rows; ``enabled=False`` keeps only counts."""

    def __init__(self, seed: Optional[int] = None, enabled: bool = True) -> None:
        self.seed = seed
        self.enabled = enabled
        self.rows: list[TraceRow] = []

    def record(self, time: int, entity: str, kind: str, detail: str = "") -> None:
        if self.enabled:
            self.rows.append(TraceRow(int(time), entity, kind, detail))

    def __iter__(self) -> Iterator[TraceRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, kind: Optional[str] = None, entity: Optional[str] = None) -> list[TraceRow]:
        return [
            r
            for r in self.rows
            if (kind is None or r.kind == kind) and (entity is None or r.entity == entity)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.seed is not None:
            buf.write(f"# seed={self.seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(self.rows)
        return buf.getvalue()

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv())


def read_csv(text: str) -> list[TraceRow]:
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {header}")
    return [TraceRow(int(t), e, k, d) for t, e, k, d in reader]


def rows_of(trace: Union[Trace, Iterable[TraceRow]]) -> list[TraceRow]:
    return list(trace)
