"""Acknowledgement, loss detection, retransmission support, FEC and congestion control."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Protocol

from .crypto import Space
from .wire import MAX_DATAGRAM_SIZE, AckFrame, AckRange, FecFrame, Frame

REORDER_THRESHOLD = 3
TIME_THRESHOLD = 9 / 8
DEFAULT_FEC_GROUP_SIZE = 4
FEC_RECEIVE_BUFFER = 1024


class RecoveryError(ValueError):
    pass


class InvalidAck(RecoveryError):
    pass


class AckOfUnsent(RecoveryError):
    pass


class EmptyGroup(RecoveryError):
    pass


class RangeSet:
    """Sorted, disjoint, inclusive ``[lo, hi]`` intervals of integers."""

    def __init__(self, values: Iterable[int] = ()) -> None:
        self._ranges: list[list[int]] = []
        for value in values:
            self.add(value)

    def add(self, value: int) -> bool:
        """Insert ``value``; returns False if it was already present."""
        r = self._ranges
        i = bisect.bisect_right(r, value, key=lambda x: x[0])
        if i > 0 and r[i - 1][1] >= value:
            return False
        merge_left = i > 0 and r[i - 1][1] == value - 1
        merge_right = i < len(r) and r[i][0] == value + 1
        if merge_left and merge_right:
            r[i - 1][1] = r[i][1]
            del r[i]
        elif merge_left:
            r[i - 1][1] = value
        elif merge_right:
            r[i][0] = value
        else:
            r.insert(i, [value, value])
        return True

    def __contains__(self, value: int) -> bool:
        r = self._ranges
        i = bisect.bisect_right(r, value, key=lambda x: x[0])
        return i > 0 and r[i - 1][1] >= value

    def __bool__(self) -> bool:
        return bool(self._ranges)

    def __iter__(self) -> Iterator[int]:
        for lo, hi in self._ranges:
            yield from range(lo, hi + 1)

    def ranges(self) -> list[tuple[int, int]]:
        return [(lo, hi) for lo, hi in self._ranges]

    def max(self) -> int:
        return self._ranges[-1][1]

    def count(self) -> int:
        return sum(hi - lo + 1 for lo, hi in self._ranges)


# -- ACK frames --------------------------------------------------------------


@dataclass
class AckState:
    received: RangeSet = field(default_factory=RangeSet)
    largest_received_at: int = 0


def generate_ack(state: AckState, now: int, max_ranges: Optional[int] = None) -> Optional[AckFrame]:
    """Encode the received set, highest run first.

    ``first_ack_range`` is the top run length minus one; each following entry
    is ``(missing run length - 1, acked run length - 1)`` going downwards.
    ``max_ranges`` drops the oldest runs when set.
    """
    if not state.received:
        return None
    runs = state.received.ranges()
    lo, hi = runs[-1]
    ranges = []
    prev_lo = lo
    for run_lo, run_hi in reversed(runs[:-1]):
        if max_ranges is not None and len(ranges) >= max_ranges:
            break
        ranges.append(AckRange(prev_lo - run_hi - 2, run_hi - run_lo))
        prev_lo = run_lo
    return AckFrame(
        largest_acked=hi,
        ack_delay_us=max(0, now - state.largest_received_at),
        first_ack_range=hi - lo,
        ranges=tuple(ranges),
    )


def ack_ranges(ack: AckFrame) -> list[tuple[int, int]]:
    """Decode an ACK frame to inclusive ``(lo, hi)`` runs, highest first."""
    hi = ack.largest_acked
    lo = hi - ack.first_ack_range
    if lo < 0:
        raise InvalidAck("first ACK range runs below zero")
    out = [(lo, hi)]
    for gap, range_len in ack.ranges:
        hi = lo - gap - 2
        lo = hi - range_len
        if lo < 0:
            raise InvalidAck("ACK range runs below zero")
        out.append((lo, hi))
    return out


def _in_runs(pn: int, runs: list[tuple[int, int]]) -> bool:
    return any(lo <= pn <= hi for lo, hi in runs)


# -- RTT ---------------------------------------------------------------------


@dataclass
class RttEstimator:
    initial_rtt: int = 100_000
    latest: Optional[int] = None
    smoothed: Optional[float] = None
    samples: int = 0

    def update(self, sample: int) -> None:
        self.latest = sample
        self.samples += 1
        if self.smoothed is None:
            self.smoothed = float(sample)
        else:
            self.smoothed = 7 / 8 * self.smoothed + 1 / 8 * sample

    @property
    def current(self) -> float:
        return self.initial_rtt if self.smoothed is None else self.smoothed


# -- sent packets and loss detection -----------------------------------------


@dataclass
class SentPacketRecord:
    pn: int
    sent_at: int
    frames: list[Frame]
    ack_eliciting: bool
    size: int = 0
    space: Space = Space.APPLICATION
    in_flight: bool = False
    fec_group: Optional[int] = None
    # Group id when this packet carries the parity for that group.
    fec_parity_for: Optional[int] = None


def on_ack_received(
    ack: AckFrame,
    records: dict[int, SentPacketRecord],
    rtt: RttEstimator,
    now: int,
    next_pn: Optional[int] = None,
) -> tuple[list[SentPacketRecord], Optional[int]]:
    """Remove every acknowledged record and take an RTT sample.

    A sample is taken only when the largest acknowledged packet is newly
    acknowledged: ``now - sent_at - ack_delay`` (the delay is not subtracted
    if that would leave nothing).
    """
    if next_pn is not None and ack.largest_acked >= next_pn:
        raise AckOfUnsent(f"ACK names pn {ack.largest_acked}, only {next_pn} sent")
    runs = ack_ranges(ack)
    newly = [records.pop(pn) for pn in [pn for pn in records if _in_runs(pn, runs)]]
    sample = None
    for record in newly:
        if record.pn == ack.largest_acked and record.ack_eliciting:
            raw = now - record.sent_at
            sample = raw - ack.ack_delay_us if raw > ack.ack_delay_us else raw
            rtt.update(sample)
    return newly, sample


def loss_delay(rtt: RttEstimator) -> float:
    return TIME_THRESHOLD * rtt.current


def detect_losses(
    records: dict[int, SentPacketRecord],
    largest_acked: Optional[int],
    rtt: RttEstimator,
    now: int,
    hold: Optional[Callable[[SentPacketRecord], bool]] = None,
) -> list[SentPacketRecord]:
    """Records below ``largest_acked`` that crossed the packet or time threshold.

    ``hold`` lets the caller keep a record out of the verdict for now (used for
    FEC members whose parity is still outstanding). Records are not removed.
    """
    if largest_acked is None or largest_acked < 0:
        return []
    delay = loss_delay(rtt)
    lost = []
    for record in records.values():
        if record.pn >= largest_acked:
            continue
        if hold is not None and hold(record):
            continue
        if largest_acked - record.pn >= REORDER_THRESHOLD or now - record.sent_at > delay:
            lost.append(record)
    return lost


def next_loss_time(
    records: dict[int, SentPacketRecord],
    largest_acked: Optional[int],
    rtt: RttEstimator,
    hold: Optional[Callable[[SentPacketRecord], bool]] = None,
) -> Optional[int]:
    """Earliest instant at which a pending record crosses the time threshold."""
    if largest_acked is None or largest_acked < 0:
        return None
    delay = loss_delay(rtt)
    earliest = None
    for record in records.values():
        if record.pn >= largest_acked or (hold is not None and hold(record)):
            continue
        at = int(record.sent_at + delay) + 1
        if earliest is None or at < earliest:
            earliest = at
    return earliest


# -- FEC ---------------------------------------------------------------------


def _xor_all(payloads: Iterable[bytes], size: int) -> bytes:
    acc = 0
    for p in payloads:
        acc ^= int.from_bytes(p.ljust(size, b"\0"), "big")
    return acc.to_bytes(size, "big")


def fec_encode_group(payloads: list[bytes], group_id: int) -> FecFrame:
    """XOR parity over zero-padded member payloads."""
    if not payloads:
        raise EmptyGroup("FEC group has no members")
    size = max(len(p) for p in payloads)
    if size == 0:
        raise EmptyGroup("FEC group members are all empty")
    return FecFrame(group_id, tuple(len(p) for p in payloads), _xor_all(payloads, size))


@dataclass
class FecGroupState:
    group_id: int
    member_count: int
    member_lengths: tuple[int, ...] = ()
    parity: Optional[bytes] = None
    members: dict[int, bytes] = field(default_factory=dict)

    def member_pns(self) -> range:
        return range(self.group_id, self.group_id + self.member_count)


def fec_try_recover(group: FecGroupState) -> Optional[tuple[int, bytes]]:
    """Return ``(pn, payload)`` of the single missing member, if recoverable."""
    if group.parity is None:
        return None
    missing = [pn for pn in group.member_pns() if pn not in group.members]
    if len(missing) != 1:
        return None
    pn = missing[0]
    size = len(group.parity)
    recovered = _xor_all([group.parity, *group.members.values()], size)
    return pn, recovered[: group.member_lengths[pn - group.group_id]]


class FecEncoder:
    """Groups consecutive outgoing packets and produces their parity frame.

    While a parity frame is waiting to be sent no new group is opened, so a
    group always covers a contiguous packet-number range.
    """

    def __init__(self, group_size: int = DEFAULT_FEC_GROUP_SIZE) -> None:
        if group_size < 1:
            raise ValueError("FEC group size must be positive")
        self.group_size = group_size
        self.group_id: Optional[int] = None
        self.started_at = 0
        self.payloads: list[bytes] = []
        self.parity_pending = False

    def add(self, pn: int, payload: bytes, now: int) -> Optional[int]:
        """Register an outgoing packet; returns its group id, or None if not grouped."""
        if self.parity_pending:
            return None
        if self.group_id is None:
            self.group_id = pn
            self.started_at = now
        self.payloads.append(payload)
        if len(self.payloads) >= self.group_size:
            self.parity_pending = True
        return self.group_id

    def flush(self) -> None:
        if self.payloads:
            self.parity_pending = True

    def take_parity(self) -> FecFrame:
        frame = fec_encode_group(self.payloads, self.group_id)
        self.group_id = None
        self.payloads = []
        self.parity_pending = False
        return frame

    def flush_deadline(self, rtt: float) -> Optional[int]:
        if self.group_id is None or self.parity_pending:
            return None
        return self.started_at + int(rtt)


class FecDecoder:
    """Keeps recent payloads and parity frames, recovering single losses."""

    def __init__(self, buffer: int = FEC_RECEIVE_BUFFER) -> None:
        self.buffer = buffer
        self.payloads: dict[int, bytes] = {}
        self.groups: dict[int, FecGroupState] = {}

    def on_packet(self, pn: int, payload: bytes) -> list[tuple[int, bytes]]:
        self.payloads[pn] = payload
        if len(self.payloads) > self.buffer:
            del self.payloads[next(iter(self.payloads))]
        return self._attempt([g for g in self.groups.values() if pn in g.member_pns()])

    def on_parity(self, frame: FecFrame) -> list[tuple[int, bytes]]:
        group = FecGroupState(frame.group_id, frame.member_count, frame.member_lengths, frame.parity)
        self.groups[frame.group_id] = group
        return self._attempt([group])

    def _attempt(self, groups: list[FecGroupState]) -> list[tuple[int, bytes]]:
        out = []
        for group in groups:
            group.members = {pn: self.payloads[pn] for pn in group.member_pns() if pn in self.payloads}
            if len(group.members) == group.member_count:
                del self.groups[group.group_id]
                continue
            recovered = fec_try_recover(group)
            if recovered is not None:
                del self.groups[group.group_id]
                self.payloads[recovered[0]] = recovered[1]
                out.append(recovered)
        return out


# -- congestion control ------------------------------------------------------


class CongestionController(Protocol):
    window: int

    def on_sent(self, size: int, now: int) -> None: ...

    def on_acked(self, size: int, sent_at: int, now: int) -> None: ...

    def on_loss(self, size: int, sent_at: int, now: int) -> None: ...


class AimdController:
    """Additive increase of one MTU per window acknowledged, halve on loss."""

    def __init__(self, initial_window: int = 10 * MAX_DATAGRAM_SIZE, mtu: int = MAX_DATAGRAM_SIZE) -> None:
        self.mtu = mtu
        self.min_window = 2 * mtu
        self.window = max(initial_window, self.min_window)
        self._recovery_start = -1

    def on_sent(self, size: int, now: int) -> None:
        pass

    def on_acked(self, size: int, sent_at: int, now: int) -> None:
        if sent_at <= self._recovery_start:
            return
        self.window += max(1, self.mtu * size // self.window)

    def on_loss(self, size: int, sent_at: int, now: int) -> None:
        # One reduction per round: losses of packets sent before the last cut are ignored.
        if sent_at <= self._recovery_start:
            return
        self._recovery_start = now
        self.window = max(self.window // 2, self.min_window)
