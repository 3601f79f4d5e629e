from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from miniquic.streams import (
    MAX_STREAM_CHUNK,
    Initiator,
    OverlapMismatch,
    RecvStream,
    StreamClosed,
    StreamLimitReached,
    StreamMap,
    StreamUnknown,
    initiator_of,
    stream_write,
)
from miniquic.wire import StreamFrame
from oracles import ReassemblyOracle


def unlimited(sid: int, n: int):
    return n, []


class TestStreamIds:
    def test_first_ids(self):
        assert StreamMap(Initiator.CLIENT).open_stream() == 0
        assert StreamMap(Initiator.SERVER).open_stream() == 1

    def test_ids_step_by_two(self):
        m = StreamMap(Initiator.CLIENT)
        assert [m.open_stream() for _ in range(3)] == [0, 2, 4]
        assert [initiator_of(s) for s in (0, 1, 2, 3)] == [Initiator.CLIENT, Initiator.SERVER] * 2

    def test_concurrency_limit(self):
        m = StreamMap(Initiator.CLIENT, max_concurrent=2)
        m.open_stream()
        m.open_stream()
        with pytest.raises(StreamLimitReached):
            m.open_stream()

    def test_peer_frames_open_streams(self):
        m = StreamMap(Initiator.SERVER)
        m.on_stream_frame(StreamFrame(4, 0, b"x"))
        assert 4 in m.streams

    def test_unknown(self):
        with pytest.raises(StreamUnknown):
            StreamMap(Initiator.CLIENT).get(8)


class TestSending:
    def test_offsets_advance(self):
        m = StreamMap(Initiator.CLIENT)
        sid = m.open_stream()
        (a,) = stream_write(m, unlimited, sid, bytes(100))
        (b,) = stream_write(m, unlimited, sid, bytes(50))
        assert (a.offset, a.length, b.offset, b.length) == (0, 100, 100, 50)

    def test_chunking(self):
        m = StreamMap(Initiator.CLIENT)
        sid = m.open_stream()
        frames = stream_write(m, unlimited, sid, bytes(3000), fin=True)
        assert [f.length for f in frames] == [MAX_STREAM_CHUNK, MAX_STREAM_CHUNK, 600]
        assert [f.fin for f in frames] == [False, False, True]

    def test_credit_limits_framing(self):
        m = StreamMap(Initiator.CLIENT)
        sid = m.open_stream()
        frames = stream_write(m, lambda s, n: (min(n, 10), ["blocked"] if n > 10 else []), sid, bytes(30))
        assert frames[0].length == 10 and "blocked" in frames

    def test_write_after_fin(self):
        m = StreamMap(Initiator.CLIENT)
        sid = m.open_stream()
        m.write(sid, b"a", fin=True)
        with pytest.raises(StreamClosed):
            m.write(sid, b"b")

    def test_empty_fin(self):
        m = StreamMap(Initiator.CLIENT)
        sid = m.open_stream()
        (frame,) = stream_write(m, unlimited, sid, b"", fin=True)
        assert frame.fin and frame.length == 0

    def test_round_robin_rotates(self):
        m = StreamMap(Initiator.CLIENT)
        a, b = m.open_stream(), m.open_stream()
        m.write(a, b"x")
        m.write(b, b"y")
        first = m.sendable()
        m.advance_round_robin()
        assert m.sendable() == first[1:] + first[:1]


class TestReassembly:
    def test_out_of_order(self):
        r = RecvStream()
        assert r.insert(3, b"def") == []
        assert r.insert(0, b"abc") == [(0, 6)]
        assert r.read(100) == b"abcdef"

    def test_duplicate_and_overlap(self):
        r = RecvStream()
        r.insert(0, b"abcd")
        assert r.insert(2, b"cdef") == [(4, 2)]
        assert r.read(10) == b"abcdef"

    def test_mismatched_overlap(self):
        r = RecvStream()
        r.insert(5, b"hello")
        with pytest.raises(OverlapMismatch):
            r.insert(7, b"XX")

    def test_split_reads(self):
        r = RecvStream()
        r.insert(0, b"abcdef")
        assert (r.read(2), r.read(2), r.read(9)) == (b"ab", b"cd", b"ef")

    def test_fin_and_eof(self):
        m = StreamMap(Initiator.SERVER)
        m.on_stream_frame(StreamFrame(0, 0, b"abc", fin=True))
        recv = m.get(0).recv
        assert recv.fin_delivered and not recv.eof
        m.read(0, 10)
        assert recv.eof

    @given(st.binary(min_size=1, max_size=400), st.integers(0, 2**32), st.booleans())
    def test_any_segmentation_reassembles(self, data, seed, dup):
        rng = random.Random(seed)
        cuts = sorted(rng.sample(range(1, len(data)), min(len(data) - 1, rng.randrange(0, 10)))) if len(data) > 1 else []
        bounds = [0, *cuts, len(data)]
        segments = [(a, data[a:b]) for a, b in zip(bounds, bounds[1:])]
        if dup:
            segments += [(a, data[a:b]) for a, b in zip(bounds, bounds[1:]) if rng.random() < 0.5]
        rng.shuffle(segments)
        r, oracle = RecvStream(), ReassemblyOracle()
        for off, seg in segments:
            r.insert(off, seg)
            oracle.insert(off, seg)
            # [DERIVED] the delivered prefix always equals the oracle's contiguous prefix.
            assert r.delivered_offset == len(oracle.prefix())
        assert r.read(len(data)) == data
