from __future__ import annotations

from typing import Optional

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miniquic.simnet import InvalidConfig, NatBox, SimConfig, Simulator, UnknownFlow
from miniquic.trace import Trace
from miniquic.wire import MAX_DATAGRAM_SIZE, Oversize

A = ("10.0.0.1", 1000)
B = ("10.0.0.2", 2000)


class Sink:
    """Records arrivals; sends whatever is placed in its outbox."""

    def __init__(self) -> None:
        self.arrivals: list[tuple[int, bytes, tuple]] = []
        self.outbox: list[tuple[bytes, tuple]] = []

    def receive(self, datagram: bytes, remote, now: int) -> None:
        self.arrivals.append((now, datagram, remote))

    def datagrams_to_send(self, now: int):
        out, self.outbox = self.outbox, []
        return out

    def next_timer(self) -> Optional[int]:
        return None

    def handle_timer(self, now: int) -> None:
        pass


def pair(config: SimConfig, nat: Optional[NatBox] = None):
    sim = Simulator(Trace(seed=config.seed))
    a, b = Sink(), Sink()
    sim.add_host("a", a, A, nat)
    sim.add_host("b", b, B)
    links = sim.connect("a", "b", config)
    return sim, a, b, links


def send_burst(sim, a, count: int, gap: int = 100) -> None:
    for i in range(count):
        sim.call_at(i * gap, lambda now, i=i: a.outbox.append((i.to_bytes(4, "big"), B)))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"loss_rate": -0.1}, {"dup_rate": 1.5}, {"delay": -1}, {"jitter": 30, "delay": 10}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            SimConfig(**kw)

    def test_rtt(self):
        assert SimConfig(delay=40).rtt == 80


class TestLink:
    def test_fifo_at_fixed_delay(self):
        sim, a, b, _ = pair(SimConfig(delay=500))
        send_burst(sim, a, 20)
        sim.advance(10**6)
        assert [int.from_bytes(d, "big") for _, d, _ in b.arrivals] == list(range(20))
        assert [t for t, _, _ in b.arrivals] == [i * 100 + 500 for i in range(20)]

    def test_total_loss(self):
        sim, a, b, (ab, _) = pair(SimConfig(loss_rate=1.0))
        send_burst(sim, a, 30)
        sim.advance(10**6)
        assert b.arrivals == []
        assert ab.dropped == ab.sent == 30

    def test_oversize(self):
        sim, a, _, _ = pair(SimConfig())
        a.outbox.append((bytes(MAX_DATAGRAM_SIZE + 1), B))
        with pytest.raises(Oversize):
            sim.pump_all()

    def test_unknown_destination(self):
        sim, a, _, _ = pair(SimConfig())
        a.outbox.append((b"x", ("192.0.2.99", 1)))
        with pytest.raises(UnknownFlow):
            sim.pump_all()

    @given(st.integers(0, 2**32), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_conservation(self, seed, loss, reorder, dup):
        sim, a, b, (ab, _) = pair(SimConfig(seed=seed, loss_rate=loss, reorder_rate=reorder, dup_rate=dup, jitter=20))
        send_burst(sim, a, 40, gap=10)
        sim.advance(200)
        assert ab.conserved()
        sim.advance(10**6)
        assert ab.in_flight == 0
        assert len(b.arrivals) == ab.delivered == ab.sent - ab.dropped + ab.duplicated

    def test_duplicates_and_reorders_happen(self):
        sim, a, b, (ab, _) = pair(SimConfig(seed=1, reorder_rate=0.5, dup_rate=0.3, jitter=5))
        send_burst(sim, a, 200, gap=1)
        sim.advance(10**6)
        order = [int.from_bytes(d, "big") for _, d, _ in b.arrivals]
        assert ab.duplicated > 0 and ab.reordered > 0
        assert order != sorted(order)
        assert sorted(set(order)) == list(range(200))


def run_trace(seed: int, steps: list[int]) -> str:
    sim, a, b, _ = pair(SimConfig(seed=seed, loss_rate=0.2, reorder_rate=0.2, dup_rate=0.2, jitter=50))
    send_burst(sim, a, 50, gap=7)
    t = 0
    for step in steps:
        t += step
        sim.advance(t)
    sim.advance(10**6)
    return sim.trace.to_csv() + repr([(t, d) for t, d, _ in b.arrivals])


class TestDeterminism:
    def test_same_seed_same_trace(self):
        assert run_trace(9, [10**6]) == run_trace(9, [10**6])

    def test_seed_matters(self):
        assert run_trace(1, [10**6]) != run_trace(2, [10**6])

    @settings(max_examples=50)
    @given(st.integers(0, 1000), st.lists(st.integers(0, 200), max_size=30))
    def test_step_invariance(self, seed, steps):
        assert run_trace(seed, steps) == run_trace(seed, [10**6])

    def test_advance_now_is_noop(self):
        sim, a, b, _ = pair(SimConfig())
        send_burst(sim, a, 3)
        sim.advance(0)
        before = (sim.now, sim.pending(), len(sim.trace))
        assert sim.advance(sim.now) == []
        assert (sim.now, sim.pending(), len(sim.trace)) == before

    def test_no_backwards(self):
        sim, _, _, _ = pair(SimConfig())
        sim.advance(10)
        with pytest.raises(ValueError):
            sim.advance(5)


class TestNat:
    def test_translation_and_rebind(self):
        nat = NatBox("nat", "198.51.100.7")
        sim, a, b, _ = pair(SimConfig(delay=10), nat)
        a.outbox.append((b"1", B))
        sim.pump_all()
        sim.advance(100)
        assert b.arrivals[0][2] == ("198.51.100.7", 40000)
        sim.rebind_at(200, nat, A)
        sim.call_at(300, lambda now: a.outbox.append((b"2", B)))
        sim.advance(1000)
        assert b.arrivals[1][2] == ("198.51.100.7", 40001)
        assert nat.rebind_count == 1

    def test_old_mapping_dropped(self):
        nat = NatBox("nat", "198.51.100.7")
        sim, a, b, _ = pair(SimConfig(delay=10), nat)
        a.outbox.append((b"1", B))
        sim.pump_all()
        sim.advance(100)
        nat.rebind(A)
        b.outbox.append((b"reply", ("198.51.100.7", 40000)))
        sim.pump_all()
        sim.advance(200)
        assert a.arrivals == []
        assert nat.dropped == 1

    def test_rebind_unknown_flow(self):
        with pytest.raises(UnknownFlow):
            NatBox("nat", "198.51.100.7").rebind(A)
