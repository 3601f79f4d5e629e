"""Analytic TCP and TCP+TLS reference model.

This is not a TCP implementation. It counts handshake legs, serializes all
streams into one ordered byte pipe, and loses the session when the 5-tuple
changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional

from .handshake import APP_DATA_SENT, HANDSHAKE_START, TraceEvent, rtt_to_first_data

TCP_HANDSHAKE_RTTS = 2
MIN_RTO = 200_000


class TlsVariant(Enum):
    TLS13 = "TLS1.3"
    TLS12 = "TLS1.2"


TLS_EXTRA_RTTS = {TlsVariant.TLS13: 1, TlsVariant.TLS12: 2}


def tcp_handshake_trace(rtt: int, tls: Optional[TlsVariant] = None, start: int = 0) -> list[TraceEvent]:
    """Events from connection start to the first application byte."""
    t = start + TCP_HANDSHAKE_RTTS * rtt
    events = [TraceEvent(start, HANDSHAKE_START), TraceEvent(t, "tcp_established")]
    if tls is not None:
        t += TLS_EXTRA_RTTS[tls] * rtt
        events.append(TraceEvent(t, "tls_established"))
    events.append(TraceEvent(t, APP_DATA_SENT))
    return events


def baseline_rtts(rtt: int) -> dict[str, Fraction]:
    rows = {"TCP": rtt_to_first_data(tcp_handshake_trace(rtt), rtt)}
    for variant in (TlsVariant.TLS13, TlsVariant.TLS12):
        rows[f"TCP+{variant.value}"] = rtt_to_first_data(tcp_handshake_trace(rtt, variant), rtt)
    return rows


def tcp_rto(rtt: int) -> int:
    return max(MIN_RTO, 4 * rtt)


class Segment(NamedTuple):
    stream_id: int
    offset: int
    length: int
    sent_at: int


class SegmentDelivery(NamedTuple):
    stream_id: int
    offset: int
    length: int
    delivered_at: int


def serialized_delivery(
    segments: Iterable[Segment], one_way: int, lost: Iterable[int] = (), rto: Optional[int] = None
) -> list[SegmentDelivery]:
    """Deliver segments in pipe order; nothing passes a missing segment.

    A lost segment (by index) is resent one RTO after its original send.
    """
    segments = list(segments)
    lost = set(lost)
    if rto is None:
        rto = tcp_rto(2 * one_way)
    out = []
    ready = 0
    for i, seg in enumerate(segments):
        arrival = seg.sent_at + one_way + (rto if i in lost else 0)
        ready = max(ready, arrival)
        out.append(SegmentDelivery(seg.stream_id, seg.offset, seg.length, ready))
    return out


def stream_completion(deliveries: Iterable[SegmentDelivery]) -> dict[int, int]:
    done: dict[int, int] = {}
    for d in deliveries:
        done[d.stream_id] = max(done.get(d.stream_id, 0), d.delivered_at)
    return done


class TcpState(Enum):
    ESTABLISHED = "established"
    RESET = "reset"


@dataclass
class TcpSessionModel:
    """A session identified by its 5-tuple; any change to it kills the session."""

    five_tuple: tuple
    state: TcpState = TcpState.ESTABLISHED
    events: list[TraceEvent] = field(default_factory=list)

    def on_packet_from(self, five_tuple: tuple, now: int) -> bool:
        if self.state is TcpState.RESET:
            return False
        if five_tuple != self.five_tuple:
            self.state = TcpState.RESET
            self.events.append(TraceEvent(now, "connection_reset"))
            return False
        return True

    @property
    def session_lost(self) -> bool:
        return self.state is TcpState.RESET
