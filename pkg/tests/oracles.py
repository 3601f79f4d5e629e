"""Reference models written independently of the package code.

Each oracle takes the most literal route to the answer: bit strings for
varints, plain sets for ACKs, a byte array for reassembly.
"""

from __future__ import annotations

import random
from typing import Iterable, Optional

from miniquic.wire import (
    AckFrame,
    AckRange,
    ConnectionCloseFrame,
    ConnectionId,
    CryptoFrame,
    DataBlockedFrame,
    FecFrame,
    LongHeader,
    MaxDataFrame,
    MaxStreamDataFrame,
    PacketType,
    PingFrame,
    ShortHeader,
    StreamDataBlockedFrame,
    StreamFrame,
)

# -- varints: build the bit string by hand ----------------------------------

_CLASSES = ((6, "00"), (14, "01"), (30, "10"), (62, "11"))


def varint_oracle(value: int) -> bytes:
    for bits, prefix in _CLASSES:
        if value < 1 << bits:
            s = prefix + format(value, f"0{bits}b")
            return int(s, 2).to_bytes(len(s) // 8, "big")
    raise OverflowError(value)


# -- ACKs: expand the frame into a plain set ---------------------------------


def ack_to_set(ack: AckFrame) -> set[int]:
    top = ack.largest_acked
    bottom = top - ack.first_ack_range
    acked = set(range(bottom, top + 1))
    for gap, length in ack.ranges:
        top = bottom - (gap + 1) - 1
        bottom = top - length
        acked |= set(range(bottom, top + 1))
    return acked


def runs_of(values: Iterable[int]) -> list[tuple[int, int]]:
    """Maximal runs ``(lo, hi)``, highest first."""
    runs: list[list[int]] = []
    for v in sorted(set(values)):
        if runs and runs[-1][1] == v - 1:
            runs[-1][1] = v
        else:
            runs.append([v, v])
    return [(lo, hi) for lo, hi in reversed(runs)]


# -- streams: write every byte where it belongs ------------------------------


class ReassemblyOracle:
    def __init__(self) -> None:
        self.buffer: dict[int, int] = {}

    def insert(self, offset: int, data: bytes) -> None:
        for i, b in enumerate(data):
            self.buffer.setdefault(offset + i, b)

    def prefix(self) -> bytes:
        out = bytearray()
        while len(out) in self.buffer:
            out.append(self.buffer[len(out)])
        return bytes(out)


# -- XOR parity ---------------------------------------------------------------


def xor_oracle(payloads: list[bytes]) -> bytes:
    size = max(len(p) for p in payloads)
    out = bytearray(size)
    for p in payloads:
        for i, b in enumerate(p):
            out[i] ^= b
    return bytes(out)


# -- random packets -----------------------------------------------------------

VARINT_EDGES = (0, 63, 64, 16383, 16384, 2**30 - 1, 2**30, 2**62 - 1)


def _varint(rng: random.Random, cap: int = 2**62 - 1) -> int:
    roll = rng.getrandbits(4)
    if roll < 5:
        edge = VARINT_EDGES[roll + rng.getrandbits(1) * 3]
        if edge <= cap:
            return edge
    value = rng.getrandbits(_WIDTHS[roll & 3])
    return value if value <= cap else value % (cap + 1)


_WIDTHS = (6, 14, 30, 62)


def _small(rng: random.Random, bits: int) -> int:
    return rng.getrandbits(bits)


def random_frame(rng: random.Random) -> object:
    kind = rng.getrandbits(4) % 10
    if kind == 0:
        data = rng.randbytes(_small(rng, 8))
        return StreamFrame(_varint(rng), _varint(rng, 2**62 - 1 - len(data)), data, fin=bool(rng.getrandbits(1)))
    if kind == 1:
        ranges = tuple(AckRange(_small(rng, 10), _small(rng, 10)) for _ in range(_small(rng, 2)))
        return AckFrame(_varint(rng), _varint(rng), _varint(rng), ranges)
    if kind == 2:
        return CryptoFrame(_varint(rng), rng.randbytes(_small(rng, 6)))
    if kind == 3:
        return MaxDataFrame(_varint(rng))
    if kind == 4:
        return MaxStreamDataFrame(_varint(rng), _varint(rng))
    if kind == 5:
        return DataBlockedFrame(_varint(rng))
    if kind == 6:
        return StreamDataBlockedFrame(_varint(rng), _varint(rng))
    if kind == 7:
        return ConnectionCloseFrame(_varint(rng), rng.randbytes(_small(rng, 4)))
    if kind == 8:
        return PingFrame()
    lengths = tuple(_small(rng, 7) for _ in range(1 + _small(rng, 2)))
    return FecFrame(_varint(rng), lengths, rng.randbytes(max(lengths)))


def _cid(rng: random.Random) -> ConnectionId:
    return ConnectionId(b"" if rng.getrandbits(2) == 0 else rng.randbytes(8))


_LONG_TYPES = (PacketType.INITIAL, PacketType.ZERO_RTT, PacketType.HANDSHAKE, PacketType.INITIAL)


def random_header(rng: random.Random, pn: Optional[int] = None) -> object:
    pn = rng.getrandbits(32) if pn is None else pn
    if rng.getrandbits(1):
        return LongHeader(_LONG_TYPES[rng.getrandbits(2)], _cid(rng), _cid(rng), pn)
    return ShortHeader(_cid(rng), pn)


def random_frames(rng: random.Random, count: Optional[int] = None) -> list:
    count = 1 + rng.getrandbits(2) if count is None else count
    return [random_frame(rng) for _ in range(count)]
