"""Bit-exact codec for varints, packet headers and frames.

Long header::

    [flags:1][version:4][dcid_len:1][dcid][scid_len:1][scid]
    [packet_number:4][payload_length:varint][protected payload]

Short header::

    [flags:1][dcid:hint][packet_number:4][protected payload]

Bit 7 of the flags byte selects the form (1 long, 0 short). For long headers
the low bits carry the packet type and every other bit is zero. Frames are a
one-byte type tag followed by their fields, integers as varints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Optional, Union

from .crypto import TAG_LEN, CipherLike, Space, select_handle

MAX_DATAGRAM_SIZE = 1392
VARINT_MAX = (1 << 62) - 1
PACKET_NUMBER_LEN = 4
CID_LEN = 8
PROTOCOL_VERSION = 0x00000001

LONG_HEADER_FORM = 0x80


class WireError(ValueError):
    pass


class ValueOutOfRange(WireError):
    pass


class Truncated(WireError):
    pass


class EmptyInput(WireError):
    pass


class Oversize(WireError):
    pass


class EmptyPacket(WireError):
    pass


class UnknownLongType(WireError):
    pass


class UnknownFrameType(WireError):
    pass


class InvalidConnectionId(WireError):
    pass


# -- varints -----------------------------------------------------------------


def varint_size(value: int) -> int:
    if value < 0 or value > VARINT_MAX:
        raise ValueOutOfRange(f"varint out of range: {value}")
    if value < 0x40:
        return 1
    if value < 0x4000:
        return 2
    if value < 0x4000_0000:
        return 4
    return 8


def encode_varint(value: int) -> bytes:
    """Encode ``value`` in the shortest 2-bit-prefixed form."""
    size = varint_size(value)
    if size == 1:
        return bytes((value,))
    if size == 2:
        return struct.pack("!H", value | 0x4000)
    if size == 4:
        return struct.pack("!I", value | 0x8000_0000)
    return struct.pack("!Q", value | 0xC000_0000_0000_0000)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode one varint at ``offset``; returns ``(value, consumed)``.

    Non-minimal encodings are accepted.
    """
    if offset >= len(data):
        raise EmptyInput("no bytes to decode")
    first = data[offset]
    size = 1 << (first >> 6)
    if offset + size > len(data):
        raise Truncated(f"varint needs {size} bytes, have {len(data) - offset}")
    value = first & 0x3F
    for b in data[offset + 1 : offset + size]:
        value = (value << 8) | b
    return value, size


class _Reader:
    __slots__ = ("data", "pos", "end")

    def __init__(self, data: bytes, pos: int = 0, end: Optional[int] = None) -> None:
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def eof(self) -> bool:
        return self.pos >= self.end

    def u8(self) -> int:
        if self.pos >= self.end:
            raise Truncated("expected 1 byte")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise Truncated(f"expected {n} bytes, have {self.end - self.pos}")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def varint(self) -> int:
        if self.pos >= self.end:
            raise Truncated("expected varint")
        size = 1 << (self.data[self.pos] >> 6)
        if self.pos + size > self.end:
            raise Truncated(f"varint needs {size} bytes, have {self.end - self.pos}")
        value = int.from_bytes(self.data[self.pos : self.pos + size], "big") & ((1 << (8 * size - 2)) - 1)
        self.pos += size
        return value


# -- connection ids and headers ----------------------------------------------


class ConnectionId(bytes):
    """A connection identifier: zero-length or exactly 8 bytes."""

    def __new__(cls, value: bytes = b"") -> ConnectionId:
        if len(value) not in (0, CID_LEN):
            raise InvalidConnectionId(f"connection id must be 0 or {CID_LEN} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return f"ConnectionId({self.hex() or '-'})"


class PacketType(IntEnum):
    INITIAL = 0x0
    ZERO_RTT = 0x1
    HANDSHAKE = 0x2
    RETRY = 0x3


_LONG_TYPE_SPACE = {
    PacketType.INITIAL: Space.INITIAL,
    PacketType.ZERO_RTT: Space.APPLICATION,
    PacketType.HANDSHAKE: Space.HANDSHAKE,
    PacketType.RETRY: Space.INITIAL,
}


@dataclass(frozen=True)
class LongHeader:
    packet_type: PacketType
    dcid: ConnectionId
    scid: ConnectionId
    packet_number: int
    version: int = PROTOCOL_VERSION
    # Filled in by the decoder; encoders compute it.
    payload_length: int = field(default=0, compare=False)

    @property
    def space(self) -> Space:
        return _LONG_TYPE_SPACE[self.packet_type]

    is_long = True


@dataclass(frozen=True)
class ShortHeader:
    dcid: ConnectionId
    packet_number: int

    @property
    def space(self) -> Space:
        return Space.APPLICATION

    is_long = False


Header = Union[LongHeader, ShortHeader]


def long_header_size(dcid_len: int, scid_len: int, payload_length: int = MAX_DATAGRAM_SIZE) -> int:
    return 1 + 4 + 1 + dcid_len + 1 + scid_len + PACKET_NUMBER_LEN + varint_size(payload_length)


def short_header_size(dcid_len: int) -> int:
    return 1 + dcid_len + PACKET_NUMBER_LEN


def decode_packet_number(truncated: int, expected: int, bits: int = 32) -> int:
    """Reconstruct a full packet number as the candidate closest to ``expected``."""
    window = 1 << bits
    half = window // 2
    mask = window - 1
    candidate = (expected & ~mask) | truncated
    if candidate <= expected - half and candidate < (1 << 62) - window:
        return candidate + window
    if candidate > expected + half and candidate >= window:
        return candidate - window
    return candidate


# -- frames ------------------------------------------------------------------


class FrameType(IntEnum):
    PING = 0x01
    ACK = 0x02
    CRYPTO = 0x06
    STREAM = 0x08
    STREAM_FIN = 0x09
    MAX_DATA = 0x10
    MAX_STREAM_DATA = 0x11
    DATA_BLOCKED = 0x14
    STREAM_DATA_BLOCKED = 0x15
    CONNECTION_CLOSE = 0x1C
    FEC = 0x30


@dataclass(frozen=True)
class StreamFrame:
    stream_id: int
    offset: int
    data: bytes
    fin: bool = False

    @property
    def length(self) -> int:
        return len(self.data)

    @property
    def end(self) -> int:
        return self.offset + len(self.data)


class AckRange(tuple):
    """``(gap, range_len)`` pair following the first ACK range."""

    __slots__ = ()

    def __new__(cls, gap: int, range_len: int) -> AckRange:
        return super().__new__(cls, (gap, range_len))

    @property
    def gap(self) -> int:
        return self[0]

    @property
    def range_len(self) -> int:
        return self[1]


@dataclass(frozen=True)
class AckFrame:
    largest_acked: int
    ack_delay_us: int
    first_ack_range: int
    ranges: tuple[AckRange, ...] = ()

    @property
    def ack_range_count(self) -> int:
        return len(self.ranges)


@dataclass(frozen=True)
class CryptoFrame:
    offset: int
    data: bytes


@dataclass(frozen=True)
class MaxDataFrame:
    limit: int


@dataclass(frozen=True)
class MaxStreamDataFrame:
    stream_id: int
    limit: int


@dataclass(frozen=True)
class DataBlockedFrame:
    at_limit: int


@dataclass(frozen=True)
class StreamDataBlockedFrame:
    stream_id: int
    at_limit: int


@dataclass(frozen=True)
class ConnectionCloseFrame:
    error_code: int
    reason: bytes = b""


@dataclass(frozen=True)
class PingFrame:
    pass


@dataclass(frozen=True)
class FecFrame:
    group_id: int
    member_lengths: tuple[int, ...]
    parity: bytes

    @property
    def member_count(self) -> int:
        return len(self.member_lengths)


Frame = Union[
    StreamFrame,
    AckFrame,
    CryptoFrame,
    MaxDataFrame,
    MaxStreamDataFrame,
    DataBlockedFrame,
    StreamDataBlockedFrame,
    ConnectionCloseFrame,
    PingFrame,
    FecFrame,
]


def encode_frame(frame: Frame) -> bytes:
    v = encode_varint
    if isinstance(frame, StreamFrame):
        tag = FrameType.STREAM_FIN if frame.fin else FrameType.STREAM
        return b"".join((bytes((tag,)), v(frame.stream_id), v(frame.offset), v(len(frame.data)), frame.data))
    if isinstance(frame, AckFrame):
        parts = [
            bytes((FrameType.ACK,)),
            v(frame.largest_acked),
            v(frame.ack_delay_us),
            v(len(frame.ranges)),
            v(frame.first_ack_range),
        ]
        for gap, range_len in frame.ranges:
            parts.append(v(gap))
            parts.append(v(range_len))
        return b"".join(parts)
    if isinstance(frame, CryptoFrame):
        return b"".join((bytes((FrameType.CRYPTO,)), v(frame.offset), v(len(frame.data)), frame.data))
    if isinstance(frame, MaxDataFrame):
        return bytes((FrameType.MAX_DATA,)) + v(frame.limit)
    if isinstance(frame, MaxStreamDataFrame):
        return bytes((FrameType.MAX_STREAM_DATA,)) + v(frame.stream_id) + v(frame.limit)
    if isinstance(frame, DataBlockedFrame):
        return bytes((FrameType.DATA_BLOCKED,)) + v(frame.at_limit)
    if isinstance(frame, StreamDataBlockedFrame):
        return bytes((FrameType.STREAM_DATA_BLOCKED,)) + v(frame.stream_id) + v(frame.at_limit)
    if isinstance(frame, ConnectionCloseFrame):
        return b"".join((bytes((FrameType.CONNECTION_CLOSE,)), v(frame.error_code), v(len(frame.reason)), frame.reason))
    if isinstance(frame, PingFrame):
        return bytes((FrameType.PING,))
    if isinstance(frame, FecFrame):
        if not frame.member_lengths:
            raise WireError("FEC frame without members")
        if len(frame.parity) != max(frame.member_lengths):
            raise WireError("FEC parity length must equal the longest member")
        parts = [bytes((FrameType.FEC,)), v(frame.group_id), v(len(frame.member_lengths))]
        parts.extend(v(n) for n in frame.member_lengths)
        parts.append(frame.parity)
        return b"".join(parts)
    raise TypeError(f"not a frame: {frame!r}")


def _decode_frame(r: _Reader) -> Frame:
    tag = r.u8()
    if tag in (FrameType.STREAM, FrameType.STREAM_FIN):
        sid = r.varint()
        offset = r.varint()
        length = r.varint()
        return StreamFrame(sid, offset, r.take(length), fin=tag == FrameType.STREAM_FIN)
    if tag == FrameType.ACK:
        largest = r.varint()
        delay = r.varint()
        count = r.varint()
        first = r.varint()
        ranges = tuple(AckRange(r.varint(), r.varint()) for _ in range(count))
        return AckFrame(largest, delay, first, ranges)
    if tag == FrameType.CRYPTO:
        offset = r.varint()
        length = r.varint()
        return CryptoFrame(offset, r.take(length))
    if tag == FrameType.MAX_DATA:
        return MaxDataFrame(r.varint())
    if tag == FrameType.MAX_STREAM_DATA:
        return MaxStreamDataFrame(r.varint(), r.varint())
    if tag == FrameType.DATA_BLOCKED:
        return DataBlockedFrame(r.varint())
    if tag == FrameType.STREAM_DATA_BLOCKED:
        return StreamDataBlockedFrame(r.varint(), r.varint())
    if tag == FrameType.CONNECTION_CLOSE:
        code = r.varint()
        length = r.varint()
        return ConnectionCloseFrame(code, r.take(length))
    if tag == FrameType.PING:
        return PingFrame()
    if tag == FrameType.FEC:
        group_id = r.varint()
        count = r.varint()
        if count == 0:
            raise WireError("FEC frame without members")
        lengths = tuple(r.varint() for _ in range(count))
        return FecFrame(group_id, lengths, r.take(max(lengths)))
    raise UnknownFrameType(f"unknown frame type 0x{tag:02x}")


def encode_frames(frames: list[Frame]) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


def decode_frames(payload: bytes) -> list[Frame]:
    r = _Reader(payload)
    frames = []
    while not r.eof():
        frames.append(_decode_frame(r))
    return frames


# -- packets -----------------------------------------------------------------


def _encode_header(header: Header, payload_length: int) -> bytes:
    pn = struct.pack("!I", header.packet_number & 0xFFFF_FFFF)
    if isinstance(header, LongHeader):
        return b"".join(
            (
                bytes((LONG_HEADER_FORM | int(header.packet_type),)),
                struct.pack("!I", header.version),
                bytes((len(header.dcid),)),
                header.dcid,
                bytes((len(header.scid),)),
                header.scid,
                pn,
                encode_varint(payload_length),
            )
        )
    return b"\x00" + header.dcid + pn


def protect_payload(header: Header, payload: bytes, cipher: CipherLike) -> bytes:
    """Protect an already-encoded frame payload and prepend the header."""
    if not payload:
        raise EmptyPacket("packet carries no frames")
    handle = select_handle(cipher, header.space)
    head = _encode_header(header, len(payload) + TAG_LEN)
    out = head + handle.protect(payload, aad=head)
    if len(out) > MAX_DATAGRAM_SIZE:
        raise Oversize(f"packet is {len(out)} bytes, limit {MAX_DATAGRAM_SIZE}")
    return out


def encode_packet(header: Header, frames: list[Frame], cipher: CipherLike) -> bytes:
    if not frames:
        raise EmptyPacket("packet carries no frames")
    return protect_payload(header, encode_frames(frames), cipher)


@dataclass(frozen=True)
class ParsedHeader:
    """A header parsed from the clear-text part of a datagram."""

    header: Header
    aad: bytes
    protected: bytes


def parse_header(
    datagram: bytes,
    cid_length_hint: int,
    largest_pn: Union[int, Mapping[Space, int], None] = None,
) -> ParsedHeader:
    """Parse the clear-text header without touching the protected payload.

    ``largest_pn`` is the largest packet number received so far in the
    packet's space (or a per-space mapping); the truncated wire value is
    expanded to the candidate closest to one past it.
    """
    if not datagram:
        raise EmptyInput("empty datagram")
    r = _Reader(datagram)
    flags = r.u8()
    if flags & LONG_HEADER_FORM:
        raw_type = flags & ~LONG_HEADER_FORM
        if raw_type not in PacketType._value2member_map_:
            raise UnknownLongType(f"long header type 0x{raw_type:x}")
        ptype = PacketType(raw_type)
        version = struct.unpack("!I", r.take(4))[0]
        dcid = ConnectionId(r.take(r.u8()))
        scid = ConnectionId(r.take(r.u8()))
        truncated = struct.unpack("!I", r.take(PACKET_NUMBER_LEN))[0]
        payload_length = r.varint()
        aad = bytes(datagram[: r.pos])
        protected = r.take(payload_length)
        space = _LONG_TYPE_SPACE[ptype]
        pn = _expand_pn(truncated, space, largest_pn)
        header: Header = LongHeader(ptype, dcid, scid, pn, version, payload_length)
    else:
        dcid = ConnectionId(r.take(cid_length_hint))
        truncated = struct.unpack("!I", r.take(PACKET_NUMBER_LEN))[0]
        aad = bytes(datagram[: r.pos])
        protected = bytes(datagram[r.pos :])
        pn = _expand_pn(truncated, Space.APPLICATION, largest_pn)
        header = ShortHeader(dcid, pn)
    return ParsedHeader(header, aad, protected)


def _expand_pn(truncated: int, space: Space, largest: Union[int, Mapping[Space, int], None]) -> int:
    if isinstance(largest, Mapping):
        largest = largest.get(space)
    if largest is None:
        largest = -1
    return decode_packet_number(truncated, largest + 1)


def unprotect_packet(
    datagram: bytes,
    cid_length_hint: int,
    cipher: CipherLike,
    largest_pn: Union[int, Mapping[Space, int], None] = None,
) -> tuple[Header, bytes]:
    """Parse and authenticate a datagram, returning the header and the frame payload."""
    parsed = parse_header(datagram, cid_length_hint, largest_pn)
    handle = select_handle(cipher, parsed.header.space)
    payload = handle.unprotect(parsed.protected, aad=parsed.aad)
    return parsed.header, payload


def decode_packet(
    datagram: bytes,
    cid_length_hint: int,
    cipher: CipherLike,
    largest_pn: Union[int, Mapping[Space, int], None] = None,
) -> tuple[Header, list[Frame]]:
    header, payload = unprotect_packet(datagram, cid_length_hint, cipher, largest_pn)
    return header, decode_frames(payload)
