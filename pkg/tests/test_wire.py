from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from miniquic.crypto import Space, keyring
from miniquic.wire import (
    MAX_DATAGRAM_SIZE,
    VARINT_MAX,
    ConnectionId,
    EmptyInput,
    InvalidConnectionId,
    LongHeader,
    Oversize,
    PacketType,
    PingFrame,
    ShortHeader,
    StreamFrame,
    Truncated,
    UnknownFrameType,
    UnknownLongType,
    ValueOutOfRange,
    decode_frames,
    decode_packet,
    decode_packet_number,
    decode_varint,
    encode_frames,
    encode_packet,
    encode_varint,
    parse_header,
    varint_size,
)
from oracles import VARINT_EDGES, random_frames, random_header, varint_oracle

KEYS = keyring(*Space)
CID = ConnectionId(bytes(range(8)))


def roundtrip(header, frames, hint=8):
    return decode_packet(encode_packet(header, frames, KEYS), hint, KEYS)


class TestVarintExamples:
    @pytest.mark.parametrize(
        "value, wire",
        [(0, "00"), (37, "25"), (15293, "7bbd")],
    )
    def test_known_encodings(self, value, wire):
        # [DERIVED] from the bit-level oracle, then pinned to the hex literal.
        assert varint_oracle(value).hex() == wire
        assert encode_varint(value).hex() == wire

    def test_too_large(self):
        with pytest.raises(ValueOutOfRange):
            encode_varint(2**62)

    def test_negative(self):
        with pytest.raises(ValueOutOfRange):
            encode_varint(-1)

    def test_decode_single_byte(self):
        assert decode_varint(bytes([0x25])) == (37, 1)

    def test_decode_accepts_non_minimal(self):
        assert decode_varint(bytes([0x40, 0x25])) == (37, 2)

    def test_decode_empty(self):
        with pytest.raises(EmptyInput):
            decode_varint(b"")

    @pytest.mark.parametrize("data", [b"\x40", b"\x80\x00\x00", b"\xc0" + bytes(6)])
    def test_decode_truncated(self, data):
        with pytest.raises(Truncated):
            decode_varint(data)

    def test_decode_at_offset(self):
        assert decode_varint(b"\xff" + encode_varint(15293), 1) == (15293, 2)


class TestVarintBoundaries:
    @pytest.mark.parametrize(
        "value, size",
        [(0, 1), (63, 1), (64, 2), (16383, 2), (16384, 4), (2**30 - 1, 4), (2**30, 8), (2**62 - 1, 8)],
    )
    def test_boundary_lengths(self, value, size):
        # [DERIVED] the oracle fixes the length class independently.
        assert len(varint_oracle(value)) == size
        raw = encode_varint(value)
        assert len(raw) == size == varint_size(value)
        assert decode_varint(raw) == (value, size)

    def test_edges_match_constants(self):
        assert VARINT_EDGES[-1] == VARINT_MAX

    @given(st.integers(min_value=0, max_value=VARINT_MAX))
    def test_encoding_matches_oracle(self, value):
        assert encode_varint(value) == varint_oracle(value)

    @given(st.integers(min_value=0, max_value=VARINT_MAX))
    def test_roundtrip(self, value):
        raw = encode_varint(value)
        assert decode_varint(raw) == (value, len(raw))

    @given(st.integers(min_value=0, max_value=VARINT_MAX), st.binary(max_size=8))
    def test_trailing_bytes_untouched(self, value, tail):
        raw = encode_varint(value)
        assert decode_varint(raw + tail) == (value, len(raw))


class TestConnectionId:
    @pytest.mark.parametrize("n", [0, 8])
    def test_allowed_lengths(self, n):
        assert len(ConnectionId(bytes(n))) == n

    @pytest.mark.parametrize("n", [1, 7, 9, 20])
    def test_other_lengths_rejected(self, n):
        with pytest.raises(InvalidConnectionId):
            ConnectionId(bytes(n))


class TestPacketExamples:
    def test_short_header_stream_roundtrip(self):
        frame = StreamFrame(4, 0, b"hello", fin=False)
        header, frames = roundtrip(ShortHeader(CID, 7), [frame])
        assert header == ShortHeader(CID, 7)
        assert frames == [frame]

    def test_oversize_rejected(self):
        overhead = len(encode_packet(ShortHeader(CID, 0), [PingFrame()], KEYS)) - 1
        # Pad with PINGs until the datagram is one byte over the limit.
        frames = [PingFrame()] * (MAX_DATAGRAM_SIZE + 1 - overhead)
        with pytest.raises(Oversize):
            encode_packet(ShortHeader(CID, 0), frames, KEYS)
        exact = encode_packet(ShortHeader(CID, 0), frames[:-1], KEYS)
        assert len(exact) == MAX_DATAGRAM_SIZE

    def test_initial_type_bits(self):
        raw = encode_packet(LongHeader(PacketType.INITIAL, CID, CID, 0), [PingFrame()], KEYS)
        assert raw[0] & 0x80
        assert raw[0] & 0x7F == 0
        assert isinstance(parse_header(raw, 8).header, LongHeader)

    def test_unknown_long_type(self):
        raw = bytearray(encode_packet(LongHeader(PacketType.INITIAL, CID, CID, 0), [PingFrame()], KEYS))
        raw[0] = 0x80 | 0x4
        with pytest.raises(UnknownLongType):
            parse_header(bytes(raw), 8)

    def test_single_byte_truncated(self):
        with pytest.raises(Truncated):
            parse_header(b"\x80", 8)

    def test_empty_datagram(self):
        with pytest.raises(EmptyInput):
            parse_header(b"", 8)

    def test_unknown_frame_type(self):
        with pytest.raises(UnknownFrameType):
            decode_frames(b"\x3f")

    def test_decoder_stops_at_payload_length(self):
        raw = encode_packet(LongHeader(PacketType.HANDSHAKE, CID, CID, 3), [PingFrame()], KEYS)
        junk = parse_header(raw + b"\xaa" * 40, 8)
        assert junk.protected == parse_header(raw, 8).protected
        header, frames = decode_packet(raw + b"\xaa" * 40, 8, KEYS)
        assert frames == [PingFrame()]

    def test_zero_length_cid_short_header(self):
        header = ShortHeader(ConnectionId(b""), 1)
        assert roundtrip(header, [PingFrame()], hint=0)[0] == header


class TestPacketNumberExpansion:
    def test_small_values_pass_through(self):
        assert decode_packet_number(5, 0) == 5

    def test_wraps_forward(self):
        # [DERIVED] the 32-bit window centred on the expected value.
        expected = 2**32 + 10
        assert decode_packet_number(3, expected) == 2**32 + 3
        assert decode_packet_number(2**32 - 2, expected) == 2**32 - 2

    @given(st.integers(0, 2**40), st.integers(-(2**31) + 1, 2**31 - 1))
    def test_nearby_numbers_recovered(self, expected, delta):
        pn = expected + delta
        if pn < 0:
            return
        assert decode_packet_number(pn & 0xFFFF_FFFF, expected) == pn

    def test_largest_pn_hint_used(self):
        raw = encode_packet(ShortHeader(CID, 2**32 + 9), [PingFrame()], KEYS)
        assert parse_header(raw, 8, largest_pn=2**32 + 5).header.packet_number == 2**32 + 9


def _fit(rng: random.Random):
    header = random_header(rng)
    frames = random_frames(rng)
    while True:
        try:
            return header, frames, encode_packet(header, frames, KEYS)
        except Oversize:
            frames = frames[:-1]


class TestRoundTripProperties:
    @given(st.integers(0, 2**32 - 1))
    def test_random_packet_roundtrip(self, seed):
        header, frames, raw = _fit(random.Random(seed))
        hint = len(header.dcid)
        decoded_header, decoded = decode_packet(raw, hint, KEYS)
        assert decoded_header == header
        assert decoded == frames
        assert encode_packet(decoded_header, decoded, KEYS) == raw

    @given(st.lists(st.sampled_from([PingFrame(), StreamFrame(0, 0, b"x")]), max_size=20))
    def test_frames_concatenate(self, frames):
        assert decode_frames(encode_frames(frames)) == frames
