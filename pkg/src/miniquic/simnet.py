"""Deterministic discrete-event network.

All randomness comes from one counter-based generator per link, and all
endpoint timers run off the virtual clock held here.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Protocol

import numpy as np

from .trace import Trace, format_detail
from .wire import MAX_DATAGRAM_SIZE, Oversize

Address = tuple[str, int]

MAX_TIMER_SPINS = 10_000


class UnknownFlow(KeyError):
    pass


class InvalidConfig(ValueError):
    pass


class TimerLivelock(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    loss_rate: float = 0.0
    reorder_rate: float = 0.0
    dup_rate: float = 0.0
    delay: int = 25_000
    jitter: int = 0

    def __post_init__(self) -> None:
        for name in ("loss_rate", "reorder_rate", "dup_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {p}")
        if self.delay < 0 or self.jitter < 0:
            raise InvalidConfig("delay and jitter must be non-negative")
        if self.jitter > self.delay:
            raise InvalidConfig("jitter may not exceed delay")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned value")

    @property
    def rtt(self) -> int:
        return 2 * self.delay


class EventKind(Enum):
    DELIVER = "deliver"
    TIMER_FIRE = "timer_fire"
    NAT_REBIND = "nat_rebind"
    CALL = "call"


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)
    cancelled: bool = field(compare=False, default=False)
    done: bool = field(compare=False, default=False)


class SimEndpoint(Protocol):
    def receive(self, datagram: bytes, remote: Address, now: int) -> None: ...

    def datagrams_to_send(self, now: int) -> list[tuple[bytes, Address]]: ...

    def next_timer(self) -> Optional[int]: ...

    def handle_timer(self, now: int) -> None: ...


@dataclass
class Delivery:
    link: Link
    datagram: bytes
    src: Address
    dst: Address


class Link:
    """One direction of a lossy, reordering, duplicating channel."""

    def __init__(
        self,
        name: str,
        config: SimConfig,
        index: int,
        drop_filter: Optional[Callable[[bytes], bool]] = None,
    ) -> None:
        self.name = name
        self.config = config
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, index])))
        self.drop_filter = drop_filter
        self.sent = 0
        self.dropped = 0
        self.duplicated = 0
        self.delivered = 0
        self.reordered = 0
        self._last: Optional[SimEvent] = None

    @property
    def in_flight(self) -> int:
        return self.sent + self.duplicated - self.delivered - self.dropped

    def conserved(self) -> bool:
        return self.delivered + self.dropped + self.in_flight == self.sent + self.duplicated

    def send(self, sim: Simulator, datagram: bytes, src: Address, dst: Address) -> list[SimEvent]:
        if len(datagram) > MAX_DATAGRAM_SIZE:
            raise Oversize(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM_SIZE}")
        now = sim.now
        cfg = self.config
        # Fixed draw order per datagram: loss, jitter, reorder, duplication.
        u_loss, u_jitter, u_reorder, u_dup = self.rng.random(4)
        self.sent += 1
        if self.drop_filter is not None and self.drop_filter(datagram):
            self.dropped += 1
            sim.trace.record(now, self.name, "link_drop", "cause=filter")
            return []
        if u_loss < cfg.loss_rate:
            self.dropped += 1
            sim.trace.record(now, self.name, "link_drop", "cause=loss")
            return []
        at = now + cfg.delay + int(round((2 * u_jitter - 1) * cfg.jitter))
        event = sim.schedule(at, EventKind.DELIVER, Delivery(self, datagram, src, dst))
        last = self._last
        if u_reorder < cfg.reorder_rate and last is not None and not (last.done or last.cancelled):
            # Swap delivery slots with the previous datagram still in flight.
            sim.cancel(event)
            sim.cancel(last)
            event = sim.schedule(min(last.at, at), EventKind.DELIVER, event.payload)
            sim.schedule(max(last.at, at), EventKind.DELIVER, last.payload)
            self.reordered += 1
            sim.trace.record(now, self.name, "link_reorder")
        out = [event]
        if u_dup < cfg.dup_rate:
            self.duplicated += 1
            out.append(sim.schedule(at, EventKind.DELIVER, Delivery(self, datagram, src, dst)))
            sim.trace.record(now, self.name, "link_dup")
        self._last = event
        return out


class NatBox:
    """Source NAT for the hosts behind it; unmapped inbound datagrams are dropped."""

    def __init__(self, name: str, external_ip: str, first_port: int = 40000) -> None:
        self.name = name
        self.external_ip = external_ip
        self.mapping: dict[Address, Address] = {}
        self.reverse: dict[Address, Address] = {}
        self.rebind_count = 0
        self.dropped = 0
        self._next_port = first_port

    def _allocate(self) -> Address:
        port = self._next_port
        self._next_port += 1
        return (self.external_ip, port)

    def translate_out(self, internal: Address) -> Address:
        external = self.mapping.get(internal)
        if external is None:
            external = self._allocate()
            self.mapping[internal] = external
            self.reverse[external] = internal
        return external

    def translate_in(self, external: Address) -> Optional[Address]:
        internal = self.reverse.get(external)
        if internal is None:
            self.dropped += 1
        return internal

    def rebind(self, internal: Address) -> Address:
        old = self.mapping.get(internal)
        if old is None:
            raise UnknownFlow(f"no mapping for {internal}")
        del self.reverse[old]
        new = self._allocate()
        self.mapping[internal] = new
        self.reverse[new] = internal
        self.rebind_count += 1
        return new


@dataclass
class Host:
    name: str
    endpoint: SimEndpoint
    address: Address
    nat: Optional[NatBox] = None
    timer: Optional[SimEvent] = None
    spins: int = 0
    last_fire: int = -1


class Simulator:
    def __init__(self, trace: Optional[Trace] = None) -> None:
        self.now = 0
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.hosts: dict[str, Host] = {}
        self.links: dict[tuple[str, str], Link] = {}
        self.nats: dict[str, NatBox] = {}
        self._heap: list[SimEvent] = []
        self._seq = 0

    # -- topology --

    def add_host(self, name: str, endpoint: SimEndpoint, address: Address, nat: Optional[NatBox] = None) -> Host:
        host = Host(name, endpoint, address, nat)
        self.hosts[name] = host
        if nat is not None:
            self.nats[nat.external_ip] = nat
        return host

    def connect(
        self,
        a: str,
        b: str,
        config: SimConfig,
        drop_ab: Optional[Callable[[bytes], bool]] = None,
        drop_ba: Optional[Callable[[bytes], bool]] = None,
    ) -> tuple[Link, Link]:
        index = len(self.links)
        ab = Link(f"link:{a}->{b}", config, index, drop_ab)
        ba = Link(f"link:{b}->{a}", config, index + 1, drop_ba)
        self.links[(a, b)] = ab
        self.links[(b, a)] = ba
        return ab, ba

    def _host_for(self, address: Address) -> Host:
        for host in self.hosts.values():
            if host.address == address and host.nat is None:
                return host
        nat = self.nats.get(address[0])
        if nat is not None:
            for host in self.hosts.values():
                if host.nat is nat:
                    return host
        raise UnknownFlow(f"no host at {address}")

    # -- scheduling --

    def schedule(self, at: int, kind: EventKind, payload: Any = None) -> SimEvent:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        event = SimEvent(int(at), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def cancel(self, event: SimEvent) -> None:
        event.cancelled = True

    def call_at(self, at: int, fn: Callable[[int], None]) -> SimEvent:
        return self.schedule(at, EventKind.CALL, fn)

    def rebind_at(self, at: int, nat: NatBox, internal: Address) -> SimEvent:
        return self.schedule(at, EventKind.NAT_REBIND, (nat, internal))

    def pending(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)

    # -- execution --

    def advance(self, until: int) -> list[SimEvent]:
        """Run every event due at or before ``until``, then move the clock there."""
        if until < self.now:
            raise ValueError("cannot advance backwards")
        executed = []
        while self._heap and self._heap[0].at <= until:
            event = heapq.heappop(self._heap)
            if event.cancelled:
                continue
            self.now = event.at
            self._execute(event)
            executed.append(event)
        self.now = until
        return executed

    def run(self, until: int, stop: Optional[Callable[[], bool]] = None) -> bool:
        """Like ``advance`` but halts right after the event that makes ``stop`` true."""
        if stop is not None and stop():
            return True
        while self._heap and self._heap[0].at <= until:
            event = heapq.heappop(self._heap)
            if event.cancelled:
                continue
            self.now = event.at
            self._execute(event)
            if stop is not None and stop():
                return True
        self.now = max(self.now, until)
        return False

    def _execute(self, event: SimEvent) -> None:
        event.done = True
        if event.kind is EventKind.DELIVER:
            self._deliver(event.payload)
        elif event.kind is EventKind.TIMER_FIRE:
            host: Host = event.payload
            if host.timer is event:
                host.timer = None
            if host.last_fire == self.now:
                host.spins += 1
                if host.spins > MAX_TIMER_SPINS:
                    raise TimerLivelock(f"{host.name} timer keeps firing at {self.now}")
            else:
                host.last_fire, host.spins = self.now, 0
            host.endpoint.handle_timer(self.now)
            self._pump(host)
        elif event.kind is EventKind.NAT_REBIND:
            nat, internal = event.payload
            old = nat.mapping.get(internal)
            new = nat.rebind(internal)
            self.trace.record(
                self.now, nat.name, "nat_rebind", format_detail(old=f"{old[0]}:{old[1]}", new=f"{new[0]}:{new[1]}")
            )
        elif event.kind is EventKind.CALL:
            event.payload(self.now)
            for host in self.hosts.values():
                self._pump(host)

    def _deliver(self, delivery: Delivery) -> None:
        link = delivery.link
        link.delivered += 1
        host = self._host_for(delivery.dst)
        if host.nat is not None:
            internal = host.nat.translate_in(delivery.dst)
            if internal is None:
                self.trace.record(
                    self.now, host.nat.name, "nat_drop", format_detail(dst=f"{delivery.dst[0]}:{delivery.dst[1]}")
                )
                return
        host.endpoint.receive(delivery.datagram, delivery.src, self.now)
        self._pump(host)

    def transmit(self, host: Host, datagram: bytes, remote: Address) -> None:
        src = host.address
        if host.nat is not None:
            src = host.nat.translate_out(host.address)
        dst_host = self._host_for(remote)
        self.links[(host.name, dst_host.name)].send(self, datagram, src, remote)

    def _pump(self, host: Host) -> None:
        for datagram, remote in host.endpoint.datagrams_to_send(self.now):
            self.transmit(host, datagram, remote)
        deadline = host.endpoint.next_timer()
        if deadline is None:
            if host.timer is not None:
                self.cancel(host.timer)
                host.timer = None
            return
        deadline = max(int(deadline), self.now)
        if host.timer is not None and not host.timer.cancelled and host.timer.at == deadline:
            return
        if host.timer is not None:
            self.cancel(host.timer)
        host.timer = self.schedule(deadline, EventKind.TIMER_FIRE, host)

    def pump_all(self) -> None:
        for host in self.hosts.values():
            self._pump(host)
