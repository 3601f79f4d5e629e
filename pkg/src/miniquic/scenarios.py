"""Named experiments run on the simulator, each producing one result row."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Any, Callable, NamedTuple, Optional

from . import checks
from .baseline import Segment, TcpSessionModel, baseline_rtts, serialized_delivery, stream_completion, tcp_rto
from .connection import (
    ConnectionClosed,
    ConnectionConfig,
    Connection,
    Endpoint,
    StreamDataDelivered,
)
from .crypto import Space
from .flowcontrol import FLOW_CONTROL_ERROR
from .handshake import NoDataSent, TraceEvent, rtt_to_first_data
from .simnet import NatBox, SimConfig, Simulator
from .trace import Trace, TraceRow, parse_detail
from .wire import ShortHeader, StreamFrame, WireError, parse_header

CLIENT_ADDRESS = ("10.0.0.2", 5000)
SERVER_ADDRESS = ("192.0.2.1", 443)
NAT_EXTERNAL_IP = "198.51.100.7"

DEFAULT_BUDGET = 120_000_000
HOL_LIMIT = 1 << 20
HANDSHAKE_KINDS = frozenset({"handshake_start", "handshake_accept", "reject_sent", "connection_created"})


class InvalidScenario(ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


OVERRIDE_TYPES: dict[str, Callable[[Any], Any]] = {
    "budget_us": int,
    "zero_length_cid": _parse_bool,
    "fec_group": int,
    "fec_drops": int,
    "hostile": _parse_bool,
    "drop": _parse_bool,
    "rebind": _parse_bool,
    "idle_timeout_us": int,
    "stream_limit": int,
    "connection_limit": int,
    "autotune": _parse_bool,
    "initial_window": int,
    "rate_bytes_per_ms": int,
    "reorder": float,
    "dup": float,
    "jitter_us": int,
}


def coerce_override(key: str, value: Any) -> Any:
    kind = OVERRIDE_TYPES.get(key)
    if kind is None:
        raise InvalidScenario(key, "unknown option")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise InvalidScenario(key, str(exc)) from None


@dataclass(frozen=True)
class Defaults:
    streams: int = 1
    bytes_per_stream: int = 16 * 1024
    options: dict[str, Any] = field(default_factory=dict)


SCENARIO_DEFAULTS: dict[str, Defaults] = {
    "handshake_fresh": Defaults(1, 16 * 1024),
    "handshake_repeat": Defaults(1, 16 * 1024),
    "hol": Defaults(
        2,
        64 * 1024,
        {"drop": True, "initial_window": HOL_LIMIT, "stream_limit": HOL_LIMIT, "connection_limit": HOL_LIMIT},
    ),
    "migration": Defaults(1, 256 * 1024, {"rebind": True, "zero_length_cid": False}),
    "fec": Defaults(1, 64 * 1024, {"fec_group": 4, "fec_drops": 1}),
    "flowcontrol": Defaults(1, 128 * 1024, {"rate_bytes_per_ms": 100, "hostile": False}),
    "idle_timeout": Defaults(1, 4 * 1024, {"idle_timeout_us": 30_000_000}),
    "rtt_compare": Defaults(1, 4 * 1024),
}
SCENARIO_NAMES = tuple(SCENARIO_DEFAULTS)


@dataclass
class Scenario:
    name: str
    sim: SimConfig = field(default_factory=SimConfig)
    streams: Optional[int] = None
    bytes_per_stream: Optional[int] = None
    overrides: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in SCENARIO_DEFAULTS:
            raise InvalidScenario("name", f"unknown scenario {self.name!r}; choose from {', '.join(SCENARIO_NAMES)}")
        self.overrides = {k: coerce_override(k, v) for k, v in self.overrides.items()}
        if self.streams is not None and self.streams < 1:
            raise InvalidScenario("streams", "need at least one stream")
        if self.bytes_per_stream is not None and self.bytes_per_stream < 0:
            raise InvalidScenario("bytes_per_stream", "must be non-negative")
        for key in ("fec_group", "rate_bytes_per_ms", "idle_timeout_us", "budget_us"):
            if key in self.overrides and self.overrides[key] <= 0:
                raise InvalidScenario(key, "must be positive")

    @property
    def defaults(self) -> Defaults:
        return SCENARIO_DEFAULTS[self.name]

    @property
    def stream_count(self) -> int:
        return self.streams if self.streams is not None else self.defaults.streams

    @property
    def size(self) -> int:
        return self.bytes_per_stream if self.bytes_per_stream is not None else self.defaults.bytes_per_stream

    def option(self, key: str, default: Any = None) -> Any:
        if key in self.overrides:
            return self.overrides[key]
        return self.defaults.options.get(key, default)

    @property
    def budget(self) -> int:
        return self.option("budget_us", DEFAULT_BUDGET)

    def connection_config(self, **extra: Any) -> ConnectionConfig:
        cfg = ConnectionConfig(**extra)
        mapping = {
            "zero_length_cid": "zero_length_cid",
            "idle_timeout_us": "idle_timeout",
            "stream_limit": "stream_limit",
            "connection_limit": "connection_limit",
            "autotune": "autotune",
            "initial_window": "initial_window",
        }
        for key, attr in mapping.items():
            value = self.option(key)
            if value is not None:
                setattr(cfg, attr, value)
        return cfg

    def sim_config(self) -> SimConfig:
        sim = self.sim
        changes = {}
        for key, attr in (("reorder", "reorder_rate"), ("dup", "dup_rate"), ("jitter_us", "jitter")):
            if key in self.overrides:
                changes[attr] = self.overrides[key]
        if not changes:
            return sim
        values = {f.name: getattr(sim, f.name) for f in fields(sim)}
        values.update(changes)
        return SimConfig(**values)


@dataclass
class ScenarioResult:
    rtts_to_first_data: Optional[Fraction]
    per_stream_latency: list[int]
    retransmissions: int
    fec_recoveries: int
    handshakes_after_migration: int
    flow_violations: int

    def csv_values(self) -> list[str]:
        rtt = "" if self.rtts_to_first_data is None else str(self.rtts_to_first_data)
        return [
            rtt,
            ";".join(str(v) for v in self.per_stream_latency),
            str(self.retransmissions),
            str(self.fec_recoveries),
            str(self.handshakes_after_migration),
            str(self.flow_violations),
        ]


RESULT_COLUMNS = tuple(f.name for f in fields(ScenarioResult))


@dataclass
class ScenarioRun:
    scenario: Scenario
    result: ScenarioResult
    trace: Trace
    details: dict[str, Any] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


class DeliveryRecord(NamedTuple):
    time: int
    connection: str
    stream_id: int
    offset: int
    length: int


def payload_for(seed: int, transfer: int, stream: int, size: int) -> bytes:
    return random.Random(f"payload:{seed}:{transfer}:{stream}").randbytes(size)


@dataclass
class Transfer:
    index: int
    started_at: int
    conn: Optional[Connection] = None
    payloads: dict[int, bytes] = field(default_factory=dict)


class Testbed:
    """One client behind a NAT and one server, joined by a pair of links."""

    __test__ = False  # not a pytest class despite the name

    def __init__(
        self,
        sim_config: SimConfig,
        client_config: Optional[ConnectionConfig] = None,
        server_config: Optional[ConnectionConfig] = None,
        *,
        drop_up: Optional[Callable[[bytes], bool]] = None,
        drop_down: Optional[Callable[[bytes], bool]] = None,
        trace_enabled: bool = True,
    ) -> None:
        self.sim_config = sim_config
        self.trace = Trace(seed=sim_config.seed, enabled=trace_enabled)
        self.sim = Simulator(self.trace)
        seed = sim_config.seed
        self.client = Endpoint(
            "client", CLIENT_ADDRESS, config=client_config or ConnectionConfig(), seed=seed * 2 + 1, trace=self.trace
        )
        self.server = Endpoint(
            "server", SERVER_ADDRESS, server=True, config=server_config or ConnectionConfig(), seed=seed * 2 + 2,
            trace=self.trace,
        )
        self.nat = NatBox("nat", NAT_EXTERNAL_IP)
        self.sim.add_host("client", self.client, CLIENT_ADDRESS, self.nat)
        self.sim.add_host("server", self.server, SERVER_ADDRESS)
        self.up, self.down = self.sim.connect("client", "server", sim_config, drop_up, drop_down)
        self.received: dict[tuple[str, int], bytearray] = {}
        self.deliveries: list[DeliveryRecord] = []
        self.transfers: list[Transfer] = []
        self.server.listeners.append(self._on_server_event)

    @property
    def now(self) -> int:
        return self.sim.now

    def _on_server_event(self, event: object, now: int) -> None:
        if not isinstance(event, StreamDataDelivered):
            return
        conn = next(c for c in self.server.connections if c.label == event.connection)
        data = conn.read(event.stream_id)
        self.received.setdefault((conn.label, event.stream_id), bytearray()).extend(data)
        self.deliveries.append(DeliveryRecord(now, conn.label, event.stream_id, event.offset, event.length))

    def server_conn(self, transfer: Transfer) -> Optional[Connection]:
        conns = self.server.connections
        return conns[transfer.index] if transfer.index < len(conns) else None

    def start_transfer(self, at: int, streams: int, size: int, *, fin: bool = True, write: bool = True) -> Transfer:
        transfer = Transfer(len(self.transfers), at)
        self.transfers.append(transfer)

        def begin(now: int) -> None:
            conn = self.client.connect(SERVER_ADDRESS, now)
            transfer.conn = conn
            for k in range(streams):
                sid = conn.open_stream()
                transfer.payloads[sid] = payload_for(self.sim_config.seed, transfer.index, k, size)
                if write:
                    conn.send_stream_data(sid, transfer.payloads[sid], fin=fin)

        self.sim.call_at(at, begin)
        return transfer

    def received_for(self, transfer: Transfer, sid: int) -> bytes:
        conn = self.server_conn(transfer)
        if conn is None:
            return b""
        return bytes(self.received.get((conn.label, sid), b""))

    def complete(self, transfer: Transfer) -> bool:
        if transfer.conn is None or not transfer.payloads:
            return False
        return all(len(self.received_for(transfer, sid)) >= len(p) for sid, p in transfer.payloads.items())

    def intact(self, transfer: Transfer) -> bool:
        return bool(transfer.payloads) and all(
            self.received_for(transfer, sid) == p for sid, p in transfer.payloads.items()
        )

    def run(self, stop: Callable[[], bool], budget: int) -> bool:
        return self.sim.run(self.sim.now + budget, stop)

    def rtts_to_first_data(self, transfer: Transfer) -> Optional[Fraction]:
        if transfer.conn is None:
            return None
        rows = [TraceEvent(r.time, r.kind) for r in self.trace if r.entity == transfer.conn.label]
        try:
            return rtt_to_first_data(rows, self.sim_config.rtt)
        except NoDataSent:
            return None

    def stream_latencies(self, transfer: Transfer) -> list[int]:
        conn = self.server_conn(transfer)
        out = []
        for sid in sorted(transfer.payloads):
            times = [d.time for d in self.deliveries if conn is not None and d.connection == conn.label and d.stream_id == sid]
            out.append(max(times) - transfer.started_at if times else -1)
        return out

    def client_counter(self, name: str) -> int:
        return sum(c.counters[name] for c in self.client.connections)

    def server_counter(self, name: str) -> int:
        return sum(c.counters[name] for c in self.server.connections)

    def result(self, transfer: Transfer, *, handshakes_after_migration: int = 0) -> ScenarioResult:
        return ScenarioResult(
            rtts_to_first_data=self.rtts_to_first_data(transfer),
            per_stream_latency=self.stream_latencies(transfer),
            retransmissions=self.client_counter("packets_retransmitted"),
            fec_recoveries=self.server_counter("fec_recovered"),
            handshakes_after_migration=handshakes_after_migration,
            flow_violations=self.server_counter("flow_violations") + self.client_counter("flow_violations"),
        )


def _invariant_failures(trace: Trace, skip_flow: bool = False) -> list[str]:
    rows = list(trace)
    found = (
        checks.packet_number_violations(rows)
        + checks.datagram_size_violations(rows)
        + checks.window_violations(rows)
        + checks.credit_monotonicity_violations(rows)
        + checks.long_header_after_established(rows)
    )
    if not skip_flow:
        found += checks.flow_limit_violations(rows)
    return [f"invariant: {v}" for v in found[:5]]


# -- individual scenarios -----------------------------------------------------


def _transfer_scenario(scenario: Scenario, expected_rtts: Fraction) -> ScenarioRun:
    bed = Testbed(scenario.sim_config(), scenario.connection_config(), scenario.connection_config())
    failures = []
    first = bed.start_transfer(0, scenario.stream_count, scenario.size)
    if not bed.run(lambda: bed.complete(first), scenario.budget):
        failures.append("first transfer did not complete within the budget")
    measured = first
    if scenario.name == "handshake_repeat":
        bed.sim.call_at(bed.now, lambda now: first.conn.close(now))
        bed.run(lambda: not bed.client.active and not bed.server.active, scenario.budget)
        second = bed.start_transfer(bed.now + 1_000, scenario.stream_count, scenario.size)
        if not bed.run(lambda: bed.complete(second), scenario.budget):
            failures.append("second transfer did not complete within the budget")
        measured = second
    for t in bed.transfers:
        if not bed.intact(t):
            failures.append(f"transfer {t.index} data mismatch")
    result = bed.result(measured)
    if result.rtts_to_first_data != expected_rtts:
        failures.append(f"rtts_to_first_data {result.rtts_to_first_data} != {expected_rtts}")
    failures += _invariant_failures(bed.trace)
    details = {"zero_rtt_refused": bed.client_counter("zero_rtt_refused")}
    return ScenarioRun(scenario, result, bed.trace, details, failures)


def run_handshake_fresh(scenario: Scenario) -> ScenarioRun:
    return _transfer_scenario(scenario, Fraction(1))


def run_handshake_repeat(scenario: Scenario) -> ScenarioRun:
    return _transfer_scenario(scenario, Fraction(0))


def _first_matching_frame(conn: Optional[Connection], datagram: bytes, want: Callable[[StreamFrame], bool]) -> Optional[StreamFrame]:
    if conn is None:
        return None
    try:
        header = parse_header(datagram, conn.config.cid_length).header
    except WireError:
        return None
    if header.space is not Space.APPLICATION:
        return None
    rec = conn.spaces[Space.APPLICATION].sent.get(header.packet_number)
    if rec is None:
        return None
    return next((f for f in rec.frames if isinstance(f, StreamFrame) and want(f)), None)


def _hol_once(scenario: Scenario, drop_offset: Optional[int]) -> tuple[Testbed, Transfer, Optional[StreamFrame]]:
    holder: dict[str, Any] = {"dropped": None}
    transfer_ref: list[Transfer] = []

    def drop(datagram: bytes) -> bool:
        if drop_offset is None or holder["dropped"] is not None or not transfer_ref:
            return False
        frame = _first_matching_frame(
            transfer_ref[0].conn, datagram, lambda f: f.stream_id == 0 and f.offset >= drop_offset
        )
        if frame is None:
            return False
        holder["dropped"] = frame
        return True

    bed = Testbed(scenario.sim_config(), scenario.connection_config(), scenario.connection_config(), drop_up=drop)
    transfer = bed.start_transfer(0, scenario.stream_count, scenario.size)
    transfer_ref.append(transfer)
    bed.run(lambda: bed.complete(transfer), scenario.budget)
    return bed, transfer, holder["dropped"]


def _stream_deliveries(bed: Testbed, transfer: Transfer, sid: int) -> list[tuple[int, int, int]]:
    conn = bed.server_conn(transfer)
    return [(d.offset, d.length, d.time) for d in bed.deliveries if conn and d.connection == conn.label and d.stream_id == sid]


def run_hol(scenario: Scenario) -> ScenarioRun:
    failures: list[str] = []
    details: dict[str, Any] = {}
    clean, clean_t, _ = _hol_once(scenario, None)
    if not clean.intact(clean_t):
        failures.append("clean run data mismatch")
    if not scenario.option("drop"):
        return ScenarioRun(scenario, clean.result(clean_t), clean.trace, details, failures + _invariant_failures(clean.trace))
    if scenario.stream_count < 2:
        raise InvalidScenario("streams", "hol needs at least two streams")
    target = min(8192, max(0, scenario.size // 2))
    lossy, lossy_t, dropped = _hol_once(scenario, target)
    if dropped is None:
        failures.append("no stream 0 frame was dropped")
    if not lossy.intact(lossy_t):
        failures.append("lossy run data mismatch")
    stream_a, stream_b = sorted(lossy_t.payloads)[:2]
    clean_b = _stream_deliveries(clean, clean_t, stream_b)
    lossy_b = _stream_deliveries(lossy, lossy_t, stream_b)
    details["other_stream_unaffected"] = bool(clean_b) and clean_b == lossy_b
    if not details["other_stream_unaffected"]:
        failures.append(f"stream {stream_b} deliveries changed when stream {stream_a} lost a packet")

    # Same send schedule through one ordered pipe.
    label = clean_t.conn.label if clean_t.conn else ""
    segments = []
    for row in clean.trace.select("stream_frame_sent", label):
        d = parse_detail(row.detail)
        segments.append(Segment(int(d["sid"]), int(d["off"]), int(d["len"]), row.time))
    rtt = scenario.sim_config().rtt
    rto = tcp_rto(rtt)
    lost = [
        i for i, s in enumerate(segments) if dropped is not None and s.stream_id == stream_a and s.offset == dropped.offset
    ][:1]
    base = stream_completion(serialized_delivery(segments, rtt // 2, (), rto))
    hol = stream_completion(serialized_delivery(segments, rtt // 2, lost, rto))
    tcp_delay = hol.get(stream_b, 0) - base.get(stream_b, 0)
    details.update(
        dropped_offset=None if dropped is None else dropped.offset,
        tcp_rto=rto,
        tcp_other_stream_delay=tcp_delay,
        quic_other_stream_delay=(lossy_b[-1][2] - clean_b[-1][2]) if clean_b and lossy_b else None,
    )
    if tcp_delay < rto:
        failures.append(f"baseline delay {tcp_delay} below one RTO {rto}")
    failures += _invariant_failures(lossy.trace)
    return ScenarioRun(scenario, lossy.result(lossy_t), lossy.trace, details, failures)


def run_migration(scenario: Scenario) -> ScenarioRun:
    zero_len = bool(scenario.option("zero_length_cid"))
    bed = Testbed(scenario.sim_config(), scenario.connection_config(), scenario.connection_config())
    transfer = bed.start_transfer(0, scenario.stream_count, scenario.size)
    total = scenario.stream_count * scenario.size
    state: dict[str, Any] = {"rebind_at": None, "old": None, "new": None}
    tcp = TcpSessionModel(five_tuple=())

    def watch(event: object, now: int) -> None:
        if state["rebind_at"] is not None or not scenario.option("rebind"):
            return
        if isinstance(event, StreamDataDelivered) and sum(len(v) for v in bed.received.values()) * 2 >= total:
            state["rebind_at"] = now
            old = bed.nat.mapping[CLIENT_ADDRESS]
            tcp.five_tuple = (old, SERVER_ADDRESS, "tcp")
            bed.sim.rebind_at(now, bed.nat, CLIENT_ADDRESS)

    bed.server.listeners.append(watch)
    done = bed.run(lambda: bed.complete(transfer) or (transfer.conn is not None and transfer.conn.closed), scenario.budget)
    done = done and bed.complete(transfer)
    rebind_at = state["rebind_at"]
    failures: list[str] = []
    handshakes = 0
    path_changes = 0
    if rebind_at is not None:
        new = bed.nat.mapping[CLIENT_ADDRESS]
        tcp.on_packet_from((new, SERVER_ADDRESS, "tcp"), rebind_at)
        handshakes = sum(1 for r in bed.trace if r.time >= rebind_at and r.kind in HANDSHAKE_KINDS)
        path_changes = len([r for r in bed.trace.select("path_changed") if r.time >= rebind_at])
    details = {
        "rebind_at": rebind_at,
        "completed": done,
        "path_changes": path_changes,
        "demux_failures": bed.server.demux_failures,
        "tcp_session_lost": tcp.session_lost,
    }
    if scenario.option("rebind") and rebind_at is None:
        failures.append("rebind never happened")
    if zero_len:
        if rebind_at is not None and bed.server.demux_failures < 1:
            failures.append("zero-length CIDs survived a rebind without a demux failure")
    else:
        if not done or not bed.intact(transfer):
            failures.append("transfer did not complete intact")
        if handshakes:
            failures.append(f"{handshakes} handshake events after the rebind")
        if rebind_at is not None and path_changes < 1:
            failures.append("server never observed the new path")
    if rebind_at is not None and not tcp.session_lost:
        failures.append("baseline session survived a 5-tuple change")
    failures += _invariant_failures(bed.trace)
    result = bed.result(transfer, handshakes_after_migration=handshakes)
    return ScenarioRun(scenario, result, bed.trace, details, failures)


def run_fec(scenario: Scenario) -> ScenarioRun:
    group = scenario.option("fec_group")
    drops = scenario.option("fec_drops")
    if drops not in (0, 1, 2):
        raise InvalidScenario("fec_drops", "must be 0, 1 or 2")
    state: dict[str, Any] = {"seen": [], "dropped": {}}
    transfer_ref: list[Transfer] = []

    def drop(datagram: bytes) -> bool:
        if not drops or not transfer_ref or transfer_ref[0].conn is None:
            return False
        conn = transfer_ref[0].conn
        try:
            header = parse_header(datagram, conn.config.cid_length).header
        except WireError:
            return False
        if not isinstance(header, ShortHeader):
            return False
        rec = conn.spaces[Space.APPLICATION].sent.get(header.packet_number)
        if rec is None or rec.fec_group is None or rec.fec_parity_for is not None:
            return False
        if not any(isinstance(f, StreamFrame) for f in rec.frames):
            return False
        g = rec.fec_group
        if g not in state["seen"]:
            state["seen"].append(g)
        if drops == 1:
            target_hit = g not in state["dropped"]
        else:
            target_hit = len(state["seen"]) >= 3 and g == state["seen"][2] and state["dropped"].get(g, 0) < 2
        if target_hit:
            state["dropped"][g] = state["dropped"].get(g, 0) + 1
        return target_hit

    bed = Testbed(
        scenario.sim_config(),
        scenario.connection_config(fec_group_size=group),
        scenario.connection_config(),
        drop_up=drop,
    )
    transfer = bed.start_transfer(0, scenario.stream_count, scenario.size)
    transfer_ref.append(transfer)
    done = bed.run(lambda: bed.complete(transfer), scenario.budget)
    result = bed.result(transfer)
    failures: list[str] = []
    if not done or not bed.intact(transfer):
        failures.append("transfer did not complete intact")
    label = transfer.conn.label if transfer.conn else ""
    lost_groups = [parse_detail(r.detail).get("group") for r in bed.trace.select("packet_lost", label)]
    dropped_groups = sorted(state["dropped"])
    details = {"dropped": dict(state["dropped"]), "lost_groups": lost_groups}
    if drops == 1:
        if result.retransmissions:
            failures.append(f"{result.retransmissions} retransmissions despite single losses per group")
        if result.fec_recoveries < len(dropped_groups):
            failures.append(f"recovered {result.fec_recoveries} of {len(dropped_groups)} dropped packets")
    elif drops == 2:
        target = str(dropped_groups[0]) if dropped_groups else None
        if state["dropped"].get(int(target) if target else -1, 0) != 2:
            failures.append("could not drop two members of one group")
        if result.retransmissions == 0:
            failures.append("double loss in a group was not retransmitted")
        if any(g != target for g in lost_groups):
            failures.append(f"retransmissions outside group {target}: {lost_groups}")
    failures += _invariant_failures(bed.trace)
    return ScenarioRun(scenario, result, bed.trace, details, failures)


def run_flowcontrol(scenario: Scenario) -> ScenarioRun:
    if scenario.option("hostile"):
        return _run_hostile(scenario)
    rate = scenario.option("rate_bytes_per_ms")
    tick = 5_000
    chunk = max(1, rate * tick // 1_000)
    bed = Testbed(scenario.sim_config(), scenario.connection_config(), scenario.connection_config())
    transfer = bed.start_transfer(0, scenario.stream_count, scenario.size, write=False)
    written = {"n": 0}

    def feed(now: int) -> None:
        conn = transfer.conn
        if conn is None or conn.closed:
            return
        start = written["n"]
        end = min(start + chunk, scenario.size)
        for sid, payload in transfer.payloads.items():
            conn.send_stream_data(sid, payload[start:end], fin=end == scenario.size)
        written["n"] = end
        if end < scenario.size:
            bed.sim.call_at(now + tick, feed)

    bed.sim.call_at(0, feed)
    done = bed.run(lambda: bed.complete(transfer), scenario.budget)
    result = bed.result(transfer)
    blocked = bed.client_counter("blocked_frames_sent")
    failures: list[str] = []
    if not done or not bed.intact(transfer):
        failures.append("transfer did not complete intact")
    if blocked:
        failures.append(f"{blocked} blocked frames sent by a sender within its rate")
    if result.flow_violations:
        failures.append(f"{result.flow_violations} flow-control violations")
    failures += _invariant_failures(bed.trace)
    details = {"blocked_frames": blocked, "rate_bytes_per_ms": rate}
    return ScenarioRun(scenario, result, bed.trace, details, failures)


def _run_hostile(scenario: Scenario) -> ScenarioRun:
    # The receiver grants nothing beyond its initial limit, and the sender's
    # window is wide enough to overrun it in the first flight.
    server_cfg = scenario.connection_config(autotune=False)
    size = max(scenario.size, 4 * server_cfg.stream_limit)
    client_cfg = scenario.connection_config(ignore_flow_control=True, initial_window=HOL_LIMIT)
    bed = Testbed(scenario.sim_config(), client_cfg, server_cfg)
    transfer = bed.start_transfer(0, 1, size)
    bed.run(lambda: bed.server.connections and bed.server.connections[0].closed, scenario.budget)
    closes = [
        e for e in bed.server.events if isinstance(e, ConnectionClosed) and e.error_code == FLOW_CONTROL_ERROR
    ]
    result = bed.result(transfer)
    failures: list[str] = []
    if result.flow_violations < 1:
        failures.append("receiver never detected the violation")
    if not closes:
        failures.append("receiver did not close with FLOW_CONTROL_ERROR")
    details = {"close_codes": [e.error_code for e in bed.server.events if isinstance(e, ConnectionClosed)]}
    failures += _invariant_failures(bed.trace, skip_flow=True)
    return ScenarioRun(scenario, result, bed.trace, details, failures)


def run_idle_timeout(scenario: Scenario) -> ScenarioRun:
    idle = scenario.option("idle_timeout_us")
    bed = Testbed(scenario.sim_config(), scenario.connection_config(), scenario.connection_config())
    transfer = bed.start_transfer(0, scenario.stream_count, scenario.size)
    budget = max(scenario.budget, 3 * idle)
    bed.run(lambda: transfer.conn is not None and not bed.client.active and not bed.server.active, budget)
    failures: list[str] = []
    if not bed.intact(transfer):
        failures.append("transfer did not complete intact")
    closes = {}
    for conn in bed.client.connections + bed.server.connections:
        received = [r.time for r in bed.trace.select("packet_received", conn.label)]
        closed = [r for r in bed.trace.select("connection_closed", conn.label)]
        if not closed:
            failures.append(f"{conn.label} never closed")
            continue
        reason = parse_detail(closed[0].detail).get("reason")
        last = max(received) if received else 0
        closes[conn.label] = closed[0].time - last
        if reason != "idle_timeout":
            failures.append(f"{conn.label} closed for {reason}")
        elif closed[0].time < last + idle:
            failures.append(f"{conn.label} closed {closed[0].time - last}us after its last packet")
    for ep in (bed.client, bed.server):
        if ep.demux.by_cid or ep.demux.fallback_by_path:
            failures.append(f"{ep.label} still routes to a closed connection")
    failures += _invariant_failures(bed.trace)
    return ScenarioRun(scenario, bed.result(transfer), bed.trace, {"quiet_before_close": closes}, failures)


def rtt_comparison(rtt: int, seed: int = 0) -> list[tuple[str, Fraction]]:
    """Rows of (protocol, RTTs before the first application byte)."""
    if rtt <= 0 or rtt % 2:
        raise ValueError("rtt must be a positive even number of microseconds")
    sim = SimConfig(seed=seed, delay=rtt // 2)
    rows = list(baseline_rtts(rtt).items())
    fresh = run_handshake_fresh(Scenario("handshake_fresh", sim))
    repeat = run_handshake_repeat(Scenario("handshake_repeat", sim))
    rows.append(("QUIC fresh", fresh.result.rtts_to_first_data))
    rows.append(("QUIC repeat", repeat.result.rtts_to_first_data))
    return rows


EXPECTED_RTTS = {"TCP": 2, "TCP+TLS1.3": 3, "TCP+TLS1.2": 4, "QUIC fresh": 1, "QUIC repeat": 0}


def run_rtt_compare(scenario: Scenario) -> ScenarioRun:
    rows = rtt_comparison(scenario.sim.rtt, scenario.sim.seed)
    failures = [f"{name}: {value} != {EXPECTED_RTTS[name]}" for name, value in rows if value != EXPECTED_RTTS[name]]
    fresh = run_handshake_fresh(Scenario("handshake_fresh", scenario.sim))
    return ScenarioRun(scenario, fresh.result, fresh.trace, {"table": rows}, failures)


RUNNERS: dict[str, Callable[[Scenario], ScenarioRun]] = {
    "handshake_fresh": run_handshake_fresh,
    "handshake_repeat": run_handshake_repeat,
    "hol": run_hol,
    "migration": run_migration,
    "fec": run_fec,
    "flowcontrol": run_flowcontrol,
    "idle_timeout": run_idle_timeout,
    "rtt_compare": run_rtt_compare,
}


def run_scenario(scenario: Scenario) -> ScenarioRun:
    return RUNNERS[scenario.name](scenario)


def run_transfer(
    sim: SimConfig,
    streams: int = 1,
    size: int = 64 * 1024,
    *,
    client_config: Optional[ConnectionConfig] = None,
    server_config: Optional[ConnectionConfig] = None,
    budget: int = DEFAULT_BUDGET,
) -> tuple[Testbed, Transfer, bool]:
    """Move ``streams`` x ``size`` bytes client to server; report completion."""
    bed = Testbed(sim, client_config, server_config)
    transfer = bed.start_transfer(0, streams, size)
    done = bed.run(lambda: bed.complete(transfer), budget)
    return bed, transfer, done
