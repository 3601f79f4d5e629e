"""Assertions over a recorded trace.

Each check returns a list of human-readable violations; empty means it holds.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable

from .trace import TraceRow, parse_detail
from .wire import MAX_DATAGRAM_SIZE


def _rows(trace: Iterable[TraceRow], kind: str) -> list[tuple[TraceRow, dict[str, str]]]:
    return [(r, parse_detail(r.detail)) for r in trace if r.kind == kind]


def packet_number_violations(trace: Iterable[TraceRow]) -> list[str]:
    """Every (connection, space) must emit exactly 0, 1, 2, ... with no reuse."""
    expected: dict[tuple[str, str], int] = defaultdict(int)
    out = []
    for row, d in _rows(trace, "packet_sent"):
        key = (row.entity, d["space"])
        pn = int(d["pn"])
        if pn != expected[key]:
            out.append(f"{row.entity} {d['space']} sent pn {pn}, expected {expected[key]}")
        expected[key] = pn + 1
    return out


def datagram_size_violations(trace: Iterable[TraceRow]) -> list[str]:
    return [
        f"{row.entity} pn {d['pn']} is {d['size']} bytes"
        for row, d in _rows(trace, "packet_sent")
        if int(d["size"]) > MAX_DATAGRAM_SIZE
    ]


def window_violations(trace: Iterable[TraceRow]) -> list[str]:
    """Ack-eliciting packets stay under the window, except PTO probes."""
    return [
        f"{row.entity} pn {d['pn']} in flight {d['in_flight']} over window {d['cwnd']}"
        for row, d in _rows(trace, "packet_sent")
        if d["eliciting"] == "1" and d.get("probe") != "1" and int(d["in_flight"]) > int(d["cwnd"])
    ]


def flow_limit_violations(trace: Iterable[TraceRow]) -> list[str]:
    out = []
    for row, d in _rows(trace, "stream_frame_sent"):
        end = int(d["off"]) + int(d["len"])
        if end > int(d["limit"]):
            out.append(f"{row.entity} stream {d['sid']} sent to {end} past limit {d['limit']}")
        if int(d["conn_sent"]) > int(d["conn_limit"]):
            out.append(f"{row.entity} connection sent {d['conn_sent']} past limit {d['conn_limit']}")
    return out


def credit_monotonicity_violations(trace: Iterable[TraceRow]) -> list[str]:
    """Advertised and applied limits never go down, per entity and scope."""
    out = []
    for kind in ("credit_issued", "credit_received"):
        last: dict[tuple[str, str], int] = {}
        for row, d in _rows(trace, kind):
            key = (row.entity, d["scope"])
            limit = int(d["limit"])
            if key in last and limit < last[key]:
                out.append(f"{row.entity} {kind} for {d['scope']} fell from {last[key]} to {limit}")
            last[key] = limit
    return out


def long_header_after_established(trace: Iterable[TraceRow]) -> list[str]:
    established: set[str] = set()
    out = []
    for row in trace:
        if row.kind == "handshake_complete":
            established.add(row.entity)
        elif row.kind == "packet_sent" and row.entity in established:
            if parse_detail(row.detail)["form"] == "long":
                out.append(f"{row.entity} sent a long header at {row.time} after establishment")
    return out


def all_violations(trace: Iterable[TraceRow]) -> list[str]:
    rows = list(trace)
    return (
        packet_number_violations(rows)
        + datagram_size_violations(rows)
        + window_violations(rows)
        + flow_limit_violations(rows)
        + credit_monotonicity_violations(rows)
        + long_header_after_established(rows)
    )
