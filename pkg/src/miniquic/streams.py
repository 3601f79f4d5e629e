"""Stream multiplexing: per-stream send queues and ordered reassembly.

Stream ids carry their initiator in the low bit: even ids belong to the
client, odd ids to the server.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Optional

from .wire import StreamFrame

DEFAULT_MAX_CONCURRENT = 100
MAX_STREAM_CHUNK = 1200


class StreamError(Exception):
    pass


class StreamLimitReached(StreamError):
    pass


class StreamClosed(StreamError):
    pass


class StreamUnknown(StreamError):
    pass


class OverlapMismatch(StreamError):
    pass


class Initiator(Enum):
    CLIENT = 0
    SERVER = 1


def initiator_of(stream_id: int) -> Initiator:
    return Initiator(stream_id & 1)


class Delivery(NamedTuple):
    stream_id: int
    offset: int
    length: int


@dataclass
class SendStream:
    next_offset: int = 0
    queued: bytearray = field(default_factory=bytearray)
    fin_requested: bool = False
    fin_sent: bool = False

    @property
    def has_pending(self) -> bool:
        return bool(self.queued) or (self.fin_requested and not self.fin_sent)


@dataclass
class RecvStream:
    delivered_offset: int = 0
    final_size: Optional[int] = None
    readable: bytearray = field(default_factory=bytearray)
    _starts: list[int] = field(default_factory=list)
    _segments: dict[int, bytes] = field(default_factory=dict)
    used: bool = False

    @property
    def fin_delivered(self) -> bool:
        return self.final_size is not None and self.delivered_offset >= self.final_size

    @property
    def eof(self) -> bool:
        """All data delivered and read."""
        return self.fin_delivered and not self.readable

    def insert(self, offset: int, data: bytes) -> list[tuple[int, int]]:
        """Store a segment and release any run now contiguous with the delivered prefix.

        Bytes already delivered are skipped; overlapping pending bytes must match.
        Returns ``(offset, length)`` of each released run.
        """
        self.used = True
        start, end = offset, offset + len(data)
        if start < self.delivered_offset:
            data = data[self.delivered_offset - start :]
            start = self.delivered_offset
        pieces = []
        cursor = start
        i = bisect.bisect_right(self._starts, start) - 1
        i = max(i, 0)
        while cursor < end and i < len(self._starts):
            seg_start = self._starts[i]
            seg = self._segments[seg_start]
            seg_end = seg_start + len(seg)
            if seg_end <= cursor:
                i += 1
                continue
            if seg_start >= end:
                break
            if seg_start > cursor:
                pieces.append((cursor, data[cursor - start : seg_start - start]))
                cursor = seg_start
            overlap_end = min(seg_end, end)
            if seg[cursor - seg_start : overlap_end - seg_start] != data[cursor - start : overlap_end - start]:
                raise OverlapMismatch(f"retransmitted bytes at {cursor} differ from stored data")
            cursor = overlap_end
            i += 1
        if cursor < end:
            pieces.append((cursor, data[cursor - start :]))
        for piece_start, piece in pieces:
            if piece:
                bisect.insort(self._starts, piece_start)
                self._segments[piece_start] = bytes(piece)
        released = []
        while self._starts and self._starts[0] == self.delivered_offset:
            seg_start = self._starts.pop(0)
            seg = self._segments.pop(seg_start)
            self.readable += seg
            self.delivered_offset += len(seg)
            if released and released[-1][0] + released[-1][1] == seg_start:
                released[-1] = (released[-1][0], released[-1][1] + len(seg))
            else:
                released.append((seg_start, len(seg)))
        return released

    def read(self, max_bytes: int) -> bytes:
        out = bytes(self.readable[:max_bytes])
        del self.readable[:max_bytes]
        return out


@dataclass
class Stream:
    stream_id: int
    send: SendStream = field(default_factory=SendStream)
    recv: RecvStream = field(default_factory=RecvStream)
    opened_locally: bool = False

    @property
    def finished(self) -> bool:
        unused = not self.opened_locally and self.send.next_offset == 0 and not self.send.has_pending
        send_done = self.send.fin_sent or unused
        recv_done = self.recv.fin_delivered or not self.recv.used
        return send_done and recv_done


# (stream_id, requested) -> (granted, side frames)
CreditFn = Callable[[int, int], tuple[int, list]]


class StreamMap:
    def __init__(self, local: Initiator, max_concurrent: int = DEFAULT_MAX_CONCURRENT) -> None:
        self.local = local
        self.max_concurrent = max_concurrent
        self.streams: dict[int, Stream] = {}
        self._next_ids = {Initiator.CLIENT: 0, Initiator.SERVER: 1}
        self._rr = 0

    def open_count(self) -> int:
        return sum(1 for s in self.streams.values() if not s.finished)

    def open_stream(self, initiator: Optional[Initiator] = None) -> int:
        initiator = self.local if initiator is None else initiator
        if self.open_count() >= self.max_concurrent:
            raise StreamLimitReached(f"{self.max_concurrent} streams already open")
        sid = self._next_ids[initiator]
        self._next_ids[initiator] += 2
        self.streams[sid] = Stream(sid, opened_locally=True)
        return sid

    def get(self, stream_id: int) -> Stream:
        try:
            return self.streams[stream_id]
        except KeyError:
            raise StreamUnknown(f"no stream {stream_id}") from None

    def get_or_create(self, stream_id: int) -> Stream:
        """Frames implicitly open peer streams."""
        stream = self.streams.get(stream_id)
        if stream is None:
            if self.open_count() >= self.max_concurrent:
                raise StreamLimitReached(f"peer exceeded {self.max_concurrent} streams")
            stream = Stream(stream_id)
            self.streams[stream_id] = stream
            owner = initiator_of(stream_id)
            self._next_ids[owner] = max(self._next_ids[owner], stream_id + 2)
        return stream

    # -- sending --

    def write(self, stream_id: int, data: bytes, fin: bool = False) -> None:
        send = self.get(stream_id).send
        if send.fin_requested:
            raise StreamClosed(f"stream {stream_id} already finished")
        send.queued += data
        send.fin_requested = fin

    def next_frame(self, stream_id: int, max_data: int, credit: CreditFn) -> tuple[Optional[StreamFrame], list]:
        """Frame up to ``max_data`` queued bytes, as far as ``credit`` allows."""
        send = self.get(stream_id).send
        want = min(len(send.queued), max_data)
        granted, side = credit(stream_id, want) if want else (0, [])
        chunk = bytes(send.queued[:granted])
        fin = send.fin_requested and granted == len(send.queued)
        if not chunk and not (fin and not send.fin_sent):
            return None, side
        del send.queued[:granted]
        frame = StreamFrame(stream_id, send.next_offset, chunk, fin=fin)
        send.next_offset += granted
        if fin:
            send.fin_sent = True
        return frame, side

    def sendable(self) -> list[int]:
        """Streams with pending data, rotated for round-robin service."""
        ids = [sid for sid, s in self.streams.items() if s.send.has_pending]
        if not ids:
            return []
        k = self._rr % len(ids)
        return ids[k:] + ids[:k]

    def advance_round_robin(self) -> None:
        self._rr += 1

    # -- receiving --

    def on_stream_frame(self, frame: StreamFrame) -> list[Delivery]:
        stream = self.get_or_create(frame.stream_id)
        recv = stream.recv
        if frame.fin:
            recv.final_size = frame.end
        released = recv.insert(frame.offset, frame.data)
        if not frame.data:
            recv.used = True
        return [Delivery(frame.stream_id, off, n) for off, n in released]

    def read(self, stream_id: int, max_bytes: int) -> bytes:
        return self.get(stream_id).recv.read(max_bytes)


def stream_write(streams: StreamMap, credit: CreditFn, stream_id: int, data: bytes, fin: bool = False) -> list:
    """Queue ``data`` and frame as much of the queue as credit allows.

    Returns the STREAM frames followed by any blocked frames raised while framing.
    """
    streams.write(stream_id, data, fin)
    frames: list = []
    side: list = []
    while streams.get(stream_id).send.has_pending:
        frame, blocked = streams.next_frame(stream_id, MAX_STREAM_CHUNK, credit)
        side.extend(blocked)
        if frame is None:
            break
        frames.append(frame)
    return frames + side
