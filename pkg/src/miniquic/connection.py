"""Per-connection state machine and endpoint-level routing.

Both classes are sans-IO: callers hand in datagrams and the current virtual
time, then collect outgoing datagrams and the next timer deadline.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

from .crypto import TAG_LEN, AuthFailure, Space
from .flowcontrol import (
    DEFAULT_CONNECTION_LIMIT,
    DEFAULT_STREAM_LIMIT,
    FlowControlViolation,
    FlowController,
)
from .handshake import (
    DEFAULT_TOKEN_LIFETIME,
    ClientHello,
    Confirm,
    HandshakeError,
    HandshakeState,
    Phase,
    Reject,
    TokenCache,
    TokenIssuer,
    decode_message,
    encode_message,
)
from .recovery import (
    AckOfUnsent,
    AckState,
    AimdController,
    CongestionController,
    FecDecoder,
    FecEncoder,
    InvalidAck,
    RttEstimator,
    SentPacketRecord,
    detect_losses,
    generate_ack,
    next_loss_time,
    on_ack_received,
)
from .streams import Initiator, OverlapMismatch, StreamError, StreamLimitReached, StreamMap
from .trace import Trace, format_detail
from .wire import (
    CID_LEN,
    MAX_DATAGRAM_SIZE,
    VARINT_MAX,
    AckFrame,
    ConnectionCloseFrame,
    ConnectionId,
    CryptoFrame,
    DataBlockedFrame,
    FecFrame,
    Frame,
    LongHeader,
    MaxDataFrame,
    MaxStreamDataFrame,
    PacketType,
    PingFrame,
    ShortHeader,
    StreamDataBlockedFrame,
    StreamFrame,
    WireError,
    decode_frames,
    encode_frame,
    encode_frames,
    long_header_size,
    parse_header,
    protect_payload,
    short_header_size,
    unprotect_packet,
    varint_size,
)

Address = tuple[str, int]

PROTOCOL_TAG = "udp"
DEFAULT_IDLE_TIMEOUT = 30_000_000
DEFAULT_INITIAL_RTT = 333_000
ACK_EVERY = 2
MAX_ACK_RANGES = 32
MIN_FRAME_ROOM = 48
# Upper bound on how long a receiver sits on an ACK; the sender's PTO allows for it.
MAX_ACK_DELAY = 25_000
PTO_PROBES_BEFORE_IDLE = 8

NO_ERROR = 0x00
PROTOCOL_VIOLATION = 0x0A


class PnExhausted(Exception):
    """The packet-number counter of a space ran out; the connection is closed."""


class ConnState(Enum):
    HANDSHAKING = "handshaking"
    ESTABLISHED = "established"
    CLOSING = "closing"
    CLOSED = "closed"


@dataclass(frozen=True)
class PathInfo:
    """The 5-tuple as seen from the local endpoint."""

    local: Address
    remote: Address
    protocol: str = PROTOCOL_TAG


# -- events ------------------------------------------------------------------


@dataclass(frozen=True)
class PathChanged:
    connection: str
    old: PathInfo
    new: PathInfo


@dataclass(frozen=True)
class DemuxFailure:
    endpoint: str
    dcid: bytes
    remote: Address


@dataclass(frozen=True)
class HandshakeCompleted:
    connection: str


@dataclass(frozen=True)
class StreamDataDelivered:
    connection: str
    stream_id: int
    offset: int
    length: int


@dataclass(frozen=True)
class ConnectionClosed:
    connection: str
    error_code: Optional[int]
    reason: str


Event = Union[PathChanged, DemuxFailure, HandshakeCompleted, StreamDataDelivered, ConnectionClosed]


# -- configuration and per-space state ---------------------------------------


@dataclass
class ConnectionConfig:
    zero_length_cid: bool = False
    idle_timeout: int = DEFAULT_IDLE_TIMEOUT
    initial_rtt: int = DEFAULT_INITIAL_RTT
    stream_limit: int = DEFAULT_STREAM_LIMIT
    connection_limit: int = DEFAULT_CONNECTION_LIMIT
    autotune: bool = True
    initial_window: int = 10 * MAX_DATAGRAM_SIZE
    max_concurrent_streams: int = 100
    fec_group_size: Optional[int] = None
    token_lifetime: int = DEFAULT_TOKEN_LIFETIME
    # Test-only hostile behaviour: send regardless of the peer's limits.
    ignore_flow_control: bool = False
    congestion_factory: Optional[Callable[[], CongestionController]] = None

    @property
    def cid_length(self) -> int:
        return 0 if self.zero_length_cid else CID_LEN


@dataclass
class PacketSpace:
    space: Space
    next_pn: int = 0
    ack: AckState = field(default_factory=AckState)
    largest_received: Optional[int] = None
    ack_unsent: bool = False
    eliciting_since_ack: int = 0
    ack_deadline: Optional[int] = None
    sent: dict[int, SentPacketRecord] = field(default_factory=dict)
    largest_acked: Optional[int] = None
    last_eliciting_sent: Optional[int] = None
    pending: list[Frame] = field(default_factory=list)
    crypto_offset: int = 0
    discarded: bool = False

    @property
    def acks_enabled(self) -> bool:
        # Handshake messages are implicitly acknowledged by the reply they provoke.
        return self.space is Space.APPLICATION

    def next_packet_number(self) -> int:
        if self.next_pn >= VARINT_MAX:
            raise PnExhausted(f"{self.space.name} packet numbers exhausted")
        pn = self.next_pn
        self.next_pn += 1
        return pn

    def ack_due(self, now: int) -> bool:
        if not self.ack_unsent or self.eliciting_since_ack == 0:
            return False
        return self.eliciting_since_ack >= ACK_EVERY or (
            self.ack_deadline is not None and now >= self.ack_deadline
        )

    def on_ack_sent(self) -> None:
        self.ack_unsent = False
        self.eliciting_since_ack = 0
        self.ack_deadline = None

    def discard(self) -> None:
        self.discarded = True
        self.sent.clear()
        self.pending.clear()
        self.ack_unsent = False
        self.ack_deadline = None

    @property
    def bytes_in_flight(self) -> int:
        return sum(r.size for r in self.sent.values() if r.in_flight)


def _is_ack_eliciting(frame: Frame) -> bool:
    return not isinstance(frame, (AckFrame, ConnectionCloseFrame))


def _is_retransmittable(frame: Frame) -> bool:
    return not isinstance(frame, (AckFrame, ConnectionCloseFrame, FecFrame))


def _stream_overhead(frame_sid: int, offset: int, length: int) -> int:
    return 1 + varint_size(frame_sid) + varint_size(offset) + varint_size(length)


def _split_stream_frame(frame: StreamFrame, room: int) -> Optional[tuple[StreamFrame, StreamFrame]]:
    take = room - _stream_overhead(frame.stream_id, frame.offset, room)
    if take <= 0 or take >= frame.length:
        return None
    head = StreamFrame(frame.stream_id, frame.offset, frame.data[:take], False)
    tail = StreamFrame(frame.stream_id, frame.offset + take, frame.data[take:], frame.fin)
    return head, tail


COUNTER_NAMES = (
    "packets_sent",
    "packets_received",
    "packets_acked",
    "packets_lost",
    "packets_retransmitted",
    "fec_recovered",
    "duplicates",
    "undecryptable",
    "malformed",
    "flow_violations",
    "blocked_frames_sent",
    "pto_fired",
    "zero_rtt_refused",
)


class Connection:
    def __init__(
        self,
        *,
        label: str,
        is_client: bool,
        config: ConnectionConfig,
        path: PathInfo,
        local_cid: ConnectionId,
        remote_cid: ConnectionId,
        now: int,
        trace: Optional[Trace] = None,
        token_cache: Optional[TokenCache] = None,
        token_issuer: Optional[TokenIssuer] = None,
    ) -> None:
        self.label = label
        self.is_client = is_client
        self.config = config
        self.path = path
        self.local_cids: dict[ConnectionId, None] = {local_cid: None}
        self.local_cid = local_cid
        self.remote_cid = remote_cid
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.token_cache = token_cache
        self.token_issuer = token_issuer
        self.server_identity: Address = path.remote
        self.state = ConnState.HANDSHAKING
        self.handshake = HandshakeState()
        self.accepted = False
        self.zero_rtt_hold = False
        self.spaces = {space: PacketSpace(space) for space in Space}
        self.streams = StreamMap(Initiator.CLIENT if is_client else Initiator.SERVER, config.max_concurrent_streams)
        self.flow = FlowController(config.stream_limit, config.connection_limit, config.autotune)
        self.rtt = RttEstimator(initial_rtt=config.initial_rtt)
        self.cc: CongestionController = (
            config.congestion_factory() if config.congestion_factory else AimdController(config.initial_window)
        )
        self.fec_encoder = FecEncoder(config.fec_group_size) if config.fec_group_size else None
        self.fec_decoder = FecDecoder()
        self.fec_parity_pn: dict[int, int] = {}
        self.idle_deadline = now + config.idle_timeout
        self.pto_count = 0
        self.counters = dict.fromkeys(COUNTER_NAMES, 0)
        self.events: list[Event] = []
        self.close_frame: Optional[ConnectionCloseFrame] = None
        self.close_reason: Optional[str] = None
        self._app_data_traced = False
        self._send_untracked: list[Frame] = []
        # Probe packets owed per space after a PTO; these ignore the window.
        self.probes: dict[Space, int] = dict.fromkeys(Space, 0)

    # -- bookkeeping helpers --

    def _trace(self, now: int, kind: str, **detail: object) -> None:
        self.trace.record(now, self.label, kind, format_detail(**detail))

    def _emit(self, event: Event) -> None:
        self.events.append(event)

    def take_events(self) -> list[Event]:
        events, self.events = self.events, []
        return events

    @property
    def closed(self) -> bool:
        return self.state is ConnState.CLOSED

    @property
    def established(self) -> bool:
        return self.state is ConnState.ESTABLISHED

    @property
    def bytes_in_flight(self) -> int:
        return sum(ps.bytes_in_flight for ps in self.spaces.values())

    def next_packet_number(self, space: Space) -> int:
        if self.closed:
            raise PnExhausted("connection closed")
        try:
            return self.spaces[space].next_packet_number()
        except PnExhausted:
            self._terminate(None, "packet numbers exhausted", None)
            raise

    def add_local_cid(self, cid: ConnectionId) -> None:
        self.local_cids[cid] = None

    # -- application surface --

    def open_stream(self) -> int:
        return self.streams.open_stream()

    def send_stream_data(self, stream_id: int, data: bytes, fin: bool = False) -> None:
        self.streams.write(stream_id, data, fin)

    def read(self, stream_id: int, max_bytes: int = 1 << 62) -> bytes:
        return self.streams.read(stream_id, max_bytes)

    def stream_eof(self, stream_id: int) -> bool:
        return self.streams.get(stream_id).recv.eof

    def close(self, now: int, error_code: int = NO_ERROR, reason: str = "") -> None:
        """Queue CONNECTION_CLOSE; the connection closes once it is sent."""
        if self.state in (ConnState.CLOSING, ConnState.CLOSED):
            return
        self.close_frame = ConnectionCloseFrame(error_code, reason.encode())
        self.close_reason = reason
        self.state = ConnState.CLOSING

    def _terminate(self, error_code: Optional[int], reason: str, now: Optional[int]) -> None:
        if self.closed:
            return
        self.state = ConnState.CLOSED
        for ps in self.spaces.values():
            ps.discard()
        self.streams.streams.clear()
        self._emit(ConnectionClosed(self.label, error_code, reason))
        if now is not None:
            self._trace(now, "connection_closed", code=error_code, reason=reason.replace(" ", "_") or "-")

    def check_idle(self, now: int) -> Optional[ConnectionClosed]:
        if self.closed or now < self.idle_deadline:
            return None
        self._terminate(None, "idle timeout", now)
        return self.events[-1]  # type: ignore[return-value]

    # -- handshake --

    def initiate(self, now: int) -> None:
        """Queue the client's first flight."""
        self._trace(now, "handshake_start", server=f"{self.server_identity[0]}:{self.server_identity[1]}")
        cached = self.token_cache.lookup(self.server_identity, now) if self.token_cache else None
        if cached is None:
            self.handshake.phase = Phase.AWAITING_REJECT
            self._queue_crypto(Space.INITIAL, ClientHello())
            return
        self.handshake.install(Space.HANDSHAKE, Space.APPLICATION)
        self.handshake.zero_rtt_attempted = True
        self.handshake.phase = Phase.AWAITING_CONFIRM
        self._queue_crypto(Space.INITIAL, ClientHello(cached.token.opaque))
        self._trace(now, "zero_rtt_attempt")

    def _queue_crypto(self, space: Space, msg: Union[ClientHello, Reject, Confirm]) -> None:
        ps = self.spaces[space]
        raw = encode_message(msg)
        ps.pending.append(CryptoFrame(ps.crypto_offset, raw))
        ps.crypto_offset += len(raw)

    def _may_send_app_data(self) -> bool:
        if self.state not in (ConnState.HANDSHAKING, ConnState.ESTABLISHED):
            return False
        if self.is_client:
            if self.established:
                return True
            return self.handshake.may_send_application_data and not self.zero_rtt_hold
        return self.accepted

    def _use_short_header(self) -> bool:
        # Keyed on the handshake phase so a closing connection keeps short headers.
        return self.handshake.phase is Phase.ESTABLISHED or (not self.is_client and self.accepted)

    def _establish(self, now: int) -> None:
        self.handshake.phase = Phase.ESTABLISHED
        self.state = ConnState.ESTABLISHED
        self.spaces[Space.INITIAL].discard()
        self.spaces[Space.HANDSHAKE].discard()
        self._emit(HandshakeCompleted(self.label))
        self._trace(now, "handshake_complete")
        if self.is_client:
            # Proves receipt of the confirmation, which is what the server waits for.
            self.spaces[Space.APPLICATION].pending.append(PingFrame())

    def _requeue_app_records(self, now: int) -> None:
        """Treat everything sent under refused 0-RTT keys as lost."""
        app = self.spaces[Space.APPLICATION]
        records = sorted(app.sent.values(), key=lambda r: r.pn)
        for rec in records:
            del app.sent[rec.pn]
            self._requeue(app, rec.frames)
            self._trace(now, "packet_lost", space="APPLICATION", pn=rec.pn, cause="zero_rtt_refused")

    def _on_crypto(self, ps: PacketSpace, frame: CryptoFrame, now: int) -> None:
        try:
            msg = decode_message(frame.data)
        except HandshakeError as exc:
            if self.is_client and frame.data[:1] == b"\x02":
                self._terminate(None, f"malformed reject: {exc}", now)
            else:
                self.counters["malformed"] += 1
                self._trace(now, "malformed_handshake", error=type(exc).__name__)
            return
        if self.is_client:
            self._client_on_message(msg, now)
        else:
            self._server_on_message(msg, now)

    def _client_on_message(self, msg: object, now: int) -> None:
        phase = self.handshake.phase
        if isinstance(msg, Reject):
            if phase not in (Phase.AWAITING_REJECT, Phase.AWAITING_CONFIRM):
                self._trace(now, "unexpected_reply", message="REJ")
                return
            if self.token_cache is not None:
                self.token_cache.store(self.server_identity, msg)
            self.spaces[Space.INITIAL].sent.clear()
            self.spaces[Space.INITIAL].pending = [
                f for f in self.spaces[Space.INITIAL].pending if not isinstance(f, CryptoFrame)
            ]
            if phase is Phase.AWAITING_CONFIRM:
                # Our 0-RTT attempt was refused: resend that data once established.
                self.counters["zero_rtt_refused"] += 1
                self.zero_rtt_hold = True
                self._requeue_app_records(now)
                self._trace(now, "zero_rtt_refused")
            self.handshake.install(Space.HANDSHAKE, Space.APPLICATION)
            self.handshake.zero_rtt_attempted = True
            self.handshake.phase = Phase.AWAITING_CONFIRM
            self._trace(now, "reject_received")
            self._queue_crypto(Space.INITIAL, ClientHello(msg.token.opaque))
        elif isinstance(msg, Confirm):
            if phase is not Phase.AWAITING_CONFIRM:
                self._trace(now, "unexpected_reply", message="CONFIRM")
                return
            self._establish(now)

    def _server_on_message(self, msg: object, now: int) -> None:
        if not isinstance(msg, ClientHello):
            self._trace(now, "unexpected_reply", message=type(msg).__name__)
            return
        if self.accepted:
            hs = self.spaces[Space.HANDSHAKE]
            if not self.established and not hs.pending and not hs.sent:
                self._queue_crypto(Space.HANDSHAKE, Confirm())
            return
        issuer = self.token_issuer
        if msg.token and issuer is not None and issuer.validate(msg.token, self.path.remote, now):
            self.accepted = True
            self.handshake.install(Space.HANDSHAKE, Space.APPLICATION)
            self.handshake.phase = Phase.AWAITING_CONFIRM
            self._queue_crypto(Space.HANDSHAKE, Confirm())
            self._trace(now, "handshake_accept")
            return
        if msg.token:
            self.counters["zero_rtt_refused"] += 1
            self._trace(now, "zero_rtt_refused")
        if issuer is None:
            return
        reject = issuer.issue(self.path.remote, now)
        raw = encode_message(reject)
        # A REJ is stateless: it is sent once and never retransmitted.
        self._send_untracked.append(CryptoFrame(0, raw))
        self._trace(now, "reject_sent")

    # -- receiving --

    def receive(self, datagram: bytes, remote: Address, now: int) -> None:
        if self.state is ConnState.CLOSED:
            return
        largest = {s: ps.largest_received for s, ps in self.spaces.items() if ps.largest_received is not None}
        try:
            header, payload = unprotect_packet(datagram, self.config.cid_length, self.handshake.keys, largest)
        except AuthFailure:
            self.counters["undecryptable"] += 1
            self._trace(now, "packet_dropped", reason="auth")
            return
        except WireError:
            self.counters["malformed"] += 1
            self._trace(now, "packet_dropped", reason="malformed")
            return
        ps = self.spaces[header.space]
        pn = header.packet_number
        if ps.discarded:
            return
        if pn in ps.ack.received:
            self.counters["duplicates"] += 1
            self._trace(now, "packet_dropped", reason="duplicate", pn=pn)
            return
        try:
            frames = decode_frames(payload)
        except WireError:
            self.counters["malformed"] += 1
            self._trace(now, "packet_dropped", reason="malformed")
            return
        if isinstance(header, LongHeader) and self.is_client and header.scid != self.remote_cid:
            self.remote_cid = header.scid
        newest = ps.largest_received is None or pn > ps.largest_received
        if remote != self.path.remote and newest:
            old = self.path
            self.path = PathInfo(old.local, remote, old.protocol)
            self._emit(PathChanged(self.label, old, self.path))
            self._trace(now, "path_changed", old=f"{old.remote[0]}:{old.remote[1]}", new=f"{remote[0]}:{remote[1]}")
        self.idle_deadline = now + self.config.idle_timeout
        self._trace(now, "packet_received", space=header.space.name, pn=pn, size=len(datagram))
        if isinstance(header, ShortHeader) and not self.is_client and self.accepted and not self.established:
            self._establish(now)
        self._process_packet(ps, pn, frames, now)
        if isinstance(header, ShortHeader) and not self.closed:
            for rpn, rpayload in self.fec_decoder.on_packet(pn, payload):
                self._inject_recovered(rpn, rpayload, now)
        self._after_receive(now)

    def _inject_recovered(self, pn: int, payload: bytes, now: int) -> None:
        app = self.spaces[Space.APPLICATION]
        if pn in app.ack.received or self.closed:
            return
        try:
            frames = decode_frames(payload)
        except WireError:
            return
        self.counters["fec_recovered"] += 1
        self._trace(now, "fec_recovered", pn=pn)
        self._process_packet(app, pn, frames, now)

    def _process_packet(self, ps: PacketSpace, pn: int, frames: list[Frame], now: int) -> None:
        ps.ack.received.add(pn)
        if ps.largest_received is None or pn > ps.largest_received:
            ps.largest_received = pn
            ps.ack.largest_received_at = now
        self.counters["packets_received"] += 1
        if ps.acks_enabled:
            ps.ack_unsent = True
            if any(_is_ack_eliciting(f) for f in frames):
                ps.eliciting_since_ack += 1
                if ps.ack_deadline is None:
                    ps.ack_deadline = now + min(int(self.rtt.current / 4), MAX_ACK_DELAY)
        for frame in frames:
            if self.state is ConnState.CLOSED:
                return
            self._on_frame(ps, frame, now)

    def _on_frame(self, ps: PacketSpace, frame: Frame, now: int) -> None:
        if isinstance(frame, StreamFrame):
            self._on_stream_frame(ps, frame, now)
        elif isinstance(frame, AckFrame):
            self._on_ack(ps, frame, now)
        elif isinstance(frame, CryptoFrame):
            self._on_crypto(ps, frame, now)
        elif isinstance(frame, (MaxDataFrame, MaxStreamDataFrame)):
            if self.flow.on_credit_frame(frame):
                self._trace(now, "credit_received", **_credit_detail(frame))
        elif isinstance(frame, (DataBlockedFrame, StreamDataBlockedFrame)):
            self._trace(now, "blocked_received", **_blocked_detail(frame))
            for credit in self.flow.on_blocked_frame(frame, now):
                self.spaces[Space.APPLICATION].pending.append(credit)
                self._trace(now, "credit_issued", **_credit_detail(credit))
        elif isinstance(frame, ConnectionCloseFrame):
            self._trace(now, "close_received", code=frame.error_code)
            self._terminate(frame.error_code, frame.reason.decode(errors="replace"), now)
        elif isinstance(frame, FecFrame):
            for rpn, rpayload in self.fec_decoder.on_parity(frame):
                self._inject_recovered(rpn, rpayload, now)

    def _protocol_error(self, reason: str, now: int, code: int = PROTOCOL_VIOLATION) -> None:
        self._trace(now, "protocol_error", code=code, reason=reason.replace(" ", "_"))
        self.close(now, code, reason)

    def _on_stream_frame(self, ps: PacketSpace, frame: StreamFrame, now: int) -> None:
        if ps.space is not Space.APPLICATION:
            self._protocol_error("stream data outside application space", now)
            return
        try:
            self.flow.enforce_receive_limit(frame)
        except FlowControlViolation as exc:
            self.counters["flow_violations"] += 1
            self._trace(now, "flow_violation", sid=frame.stream_id, end=frame.end)
            self.close_frame = exc.frame
            self.close_reason = str(exc)
            self.state = ConnState.CLOSING
            return
        try:
            deliveries = self.streams.on_stream_frame(frame)
        except (OverlapMismatch, StreamLimitReached) as exc:
            self._protocol_error(str(exc), now)
            return
        if frame.fin:
            self.flow.mark_final_size(frame.stream_id, frame.end)
        for d in deliveries:
            self.flow.record_delivery(d.stream_id, d.length, now)
            self._emit(StreamDataDelivered(self.label, d.stream_id, d.offset, d.length))
            self._trace(now, "stream_delivered", sid=d.stream_id, off=d.offset, len=d.length)

    def _on_ack(self, ps: PacketSpace, ack: AckFrame, now: int) -> None:
        try:
            newly, sample = on_ack_received(ack, ps.sent, self.rtt, now, next_pn=ps.next_pn)
        except (AckOfUnsent, InvalidAck) as exc:
            self._protocol_error(str(exc), now)
            return
        for rec in newly:
            self.counters["packets_acked"] += 1
            if rec.in_flight:
                self.cc.on_acked(rec.size, rec.sent_at, now)
        if ps.largest_acked is None or ack.largest_acked > ps.largest_acked:
            ps.largest_acked = ack.largest_acked
        if newly:
            self.pto_count = 0
        if sample is not None:
            self._trace(now, "rtt_sample", latest=sample, smoothed=round(self.rtt.smoothed or 0))
        lost = detect_losses(ps.sent, ps.largest_acked, self.rtt, now, self._fec_hold)
        self._on_lost(ps, lost, now, "threshold")

    def _after_receive(self, now: int) -> None:
        if self.state is not ConnState.CLOSED:
            for credit in self.flow.issue_credit(now, self.rtt.current):
                self.spaces[Space.APPLICATION].pending.append(credit)
                self._trace(now, "credit_issued", **_credit_detail(credit))

    # -- loss handling --

    def _fec_hold(self, rec: SentPacketRecord) -> bool:
        if rec.fec_group is None or rec.fec_parity_for is not None:
            return False
        parity_pn = self.fec_parity_pn.get(rec.fec_group)
        if parity_pn is None:
            return True
        return parity_pn in self.spaces[Space.APPLICATION].sent

    def _requeue(self, ps: PacketSpace, frames: list[Frame]) -> bool:
        requeued = False
        for frame in frames:
            if isinstance(frame, (MaxDataFrame, MaxStreamDataFrame)):
                frame = self.flow.current_credit_frame(frame)
            if _is_retransmittable(frame):
                ps.pending.append(frame)
                requeued = True
        return requeued

    def _on_lost(self, ps: PacketSpace, records: list[SentPacketRecord], now: int, cause: str, congestion: bool = True) -> None:
        for rec in sorted(records, key=lambda r: r.pn):
            if ps.sent.pop(rec.pn, None) is None:
                continue
            self.counters["packets_lost"] += 1
            if congestion and rec.in_flight:
                self.cc.on_loss(rec.size, rec.sent_at, now)
            if self._requeue(ps, rec.frames):
                self.counters["packets_retransmitted"] += 1
            self._trace(
                now, "packet_lost", space=ps.space.name, pn=rec.pn, cause=cause,
                group=rec.fec_group if rec.fec_group is not None else "-",
            )

    def _pto_interval(self) -> float:
        base = 2 * self.rtt.current + MAX_ACK_DELAY
        # Backoff stops growing well short of the idle timeout, so a few
        # probes always get a chance before the connection gives up.
        ceiling = max(base, self.config.idle_timeout / PTO_PROBES_BEFORE_IDLE)
        return min(base * (2 ** min(self.pto_count, 16)), ceiling)

    # -- timers --

    def _space_timers(self, ps: PacketSpace) -> list[int]:
        out = []
        if ps.discarded:
            return out
        if ps.acks_enabled and ps.ack_unsent and ps.eliciting_since_ack and ps.ack_deadline is not None:
            out.append(ps.ack_deadline)
        loss_at = next_loss_time(ps.sent, ps.largest_acked, self.rtt, self._fec_hold)
        if loss_at is not None:
            out.append(loss_at)
        if ps.last_eliciting_sent is not None and any(r.ack_eliciting for r in ps.sent.values()):
            out.append(math.ceil(ps.last_eliciting_sent + self._pto_interval()))
        return out

    def next_timer(self) -> Optional[int]:
        if self.closed:
            return None
        deadlines = [self.idle_deadline]
        for ps in self.spaces.values():
            deadlines += self._space_timers(ps)
        if self.fec_encoder is not None:
            flush_at = self.fec_encoder.flush_deadline(self.rtt.current)
            if flush_at is not None:
                deadlines.append(flush_at)
        return min(deadlines)

    def handle_timer(self, now: int) -> None:
        if self.closed:
            return
        if now >= self.idle_deadline:
            self._terminate(None, "idle timeout", now)
            return
        for ps in self.spaces.values():
            if ps.discarded:
                continue
            lost = detect_losses(ps.sent, ps.largest_acked, self.rtt, now, self._fec_hold)
            self._on_lost(ps, lost, now, "time")
            eliciting = sorted((r for r in ps.sent.values() if r.ack_eliciting), key=lambda r: r.pn)
            if eliciting and ps.last_eliciting_sent is not None:
                if now >= ps.last_eliciting_sent + self._pto_interval():
                    self.pto_count += 1
                    self.counters["pto_fired"] += 1
                    self._trace(now, "pto", space=ps.space.name, count=self.pto_count)
                    self._on_lost(ps, eliciting[:1], now, "pto", congestion=False)
                    if not ps.pending:
                        ps.pending.append(PingFrame())
                    # The probe goes out even when the window is full.
                    self.probes[ps.space] = 1
                    ps.last_eliciting_sent = now
        if self.fec_encoder is not None:
            flush_at = self.fec_encoder.flush_deadline(self.rtt.current)
            if flush_at is not None and now >= flush_at:
                self.fec_encoder.flush()

    # -- sending --

    def datagrams_to_send(self, now: int) -> list[bytes]:
        if self.state is ConnState.CLOSED:
            return []
        out = []
        if self._send_untracked:
            out.append(self._build_untracked(now))
        if self.state is ConnState.CLOSING:
            datagram = self._build_close(now)
            if datagram is not None:
                out.append(datagram)
            return out
        for space in Space:
            ps = self.spaces[space]
            if ps.discarded or space not in self.handshake.keys:
                continue
            while not self.closed:
                try:
                    datagram = self._build_packet(ps, now)
                except PnExhausted:
                    return out
                if datagram is None:
                    break
                out.append(datagram)
        return out

    def _header(self, ps: PacketSpace, pn: int) -> Union[LongHeader, ShortHeader]:
        if ps.space is Space.INITIAL:
            return LongHeader(PacketType.INITIAL, self.remote_cid, self.local_cid, pn)
        if ps.space is Space.HANDSHAKE:
            return LongHeader(PacketType.HANDSHAKE, self.remote_cid, self.local_cid, pn)
        if self._use_short_header():
            return ShortHeader(self.remote_cid, pn)
        return LongHeader(PacketType.ZERO_RTT, self.remote_cid, self.local_cid, pn)

    def _header_size(self, ps: PacketSpace) -> int:
        if ps.space is Space.APPLICATION and self._use_short_header():
            return short_header_size(len(self.remote_cid))
        return long_header_size(len(self.remote_cid), len(self.local_cid))

    def _fec_active(self, ps: PacketSpace) -> bool:
        return self.fec_encoder is not None and ps.space is Space.APPLICATION and self._use_short_header()

    def _fec_reserve(self) -> int:
        g = self.fec_encoder.group_size if self.fec_encoder else 0
        return 1 + 8 + varint_size(g) + 2 * g + 2

    def _emit_packet(
        self,
        ps: PacketSpace,
        frames: list[Frame],
        now: int,
        *,
        track: bool = True,
        fec_parity_for: Optional[int] = None,
    ) -> bytes:
        pn = self.next_packet_number(ps.space)
        header = self._header(ps, pn)
        payload = encode_frames(frames)
        datagram = protect_payload(header, payload, self.handshake.keys)
        eliciting = any(_is_ack_eliciting(f) for f in frames)
        group = None
        if self._fec_active(ps) and fec_parity_for is None:
            group = self.fec_encoder.add(pn, payload, now)
        if any(isinstance(f, AckFrame) for f in frames):
            ps.on_ack_sent()
        if eliciting and track:
            ps.sent[pn] = SentPacketRecord(
                pn=pn,
                sent_at=now,
                frames=[f for f in frames if _is_retransmittable(f)],
                ack_eliciting=True,
                size=len(datagram),
                space=ps.space,
                in_flight=True,
                fec_group=group,
                fec_parity_for=fec_parity_for,
            )
            ps.last_eliciting_sent = now
            self.cc.on_sent(len(datagram), now)
        probe = 0
        if eliciting and track and self.probes[ps.space]:
            self.probes[ps.space] -= 1
            probe = 1
        self.counters["packets_sent"] += 1
        self._trace(
            now,
            "packet_sent",
            space=ps.space.name,
            form="long" if isinstance(header, LongHeader) else "short",
            pn=pn,
            size=len(datagram),
            eliciting=int(eliciting),
            in_flight=self.bytes_in_flight,
            cwnd=self.cc.window,
            probe=probe,
        )
        for f in frames:
            if isinstance(f, StreamFrame):
                s = self.flow.stream(f.stream_id)
                self._trace(
                    now,
                    "stream_frame_sent",
                    sid=f.stream_id,
                    off=f.offset,
                    len=f.length,
                    fin=int(f.fin),
                    limit=s.send_limit,
                    conn_sent=self.flow.connection.sent_total,
                    conn_limit=self.flow.connection.send_limit,
                )
                if not self._app_data_traced:
                    self._app_data_traced = True
                    self._trace(now, "app_data_sent", pn=pn)
            elif isinstance(f, (DataBlockedFrame, StreamDataBlockedFrame)):
                self.counters["blocked_frames_sent"] += 1
                self._trace(now, "blocked_sent", **_blocked_detail(f))
        return datagram

    def _build_untracked(self, now: int) -> bytes:
        frames, self._send_untracked = self._send_untracked, []
        return self._emit_packet(self.spaces[Space.INITIAL], frames, now, track=False)

    def _build_close(self, now: int) -> Optional[bytes]:
        frame = self.close_frame or ConnectionCloseFrame(NO_ERROR)
        live = [s for s in Space if not self.spaces[s].discarded and s in self.handshake.keys]
        datagram = None
        if live:
            space = Space.APPLICATION if Space.APPLICATION in live and (
                self._use_short_header() or self.is_client
            ) else live[0]
            try:
                datagram = self._emit_packet(self.spaces[space], [frame], now, track=False)
            except PnExhausted:
                return None
            self._trace(now, "close_sent", code=frame.error_code)
        self._terminate(frame.error_code, self.close_reason or "", now)
        return datagram

    def _credit(self, stream_id: int, requested: int) -> tuple[int, list]:
        if self.config.ignore_flow_control:
            s = self.flow.stream(stream_id)
            s.sent_highest += requested
            self.flow.connection.sent_total += requested
            return requested, []
        return self.flow.consume_send_credit(stream_id, requested)

    def _build_packet(self, ps: PacketSpace, now: int) -> Optional[bytes]:
        header_size = self._header_size(ps)
        budget = MAX_DATAGRAM_SIZE - header_size - TAG_LEN
        fec = self._fec_active(ps)
        if fec:
            budget -= self._fec_reserve()
        ack = None
        if ps.acks_enabled and ps.ack_unsent:
            ack = generate_ack(ps.ack, now, MAX_ACK_RANGES)
        ack_size = len(encode_frame(ack)) if ack else 0
        room = self.cc.window - self.bytes_in_flight - header_size - TAG_LEN
        if self.probes[ps.space]:
            room = MAX_DATAGRAM_SIZE - header_size - TAG_LEN

        if fec and self.fec_encoder.parity_pending:
            encoder = self.fec_encoder
            needed = max(len(p) for p in encoder.payloads) + self._fec_reserve()
            if room >= needed:
                frame = encoder.take_parity()
                frames: list[Frame] = [frame]
                if ack is not None and len(encode_frame(frame)) + ack_size <= min(budget + self._fec_reserve(), room):
                    frames.insert(0, ack)
                datagram = self._emit_packet(ps, frames, now, fec_parity_for=frame.group_id)
                self.fec_parity_pn[frame.group_id] = self.spaces[Space.APPLICATION].next_pn - 1
                return datagram
            if ack is not None and ps.ack_due(now):
                return self._emit_packet(ps, [ack], now)
            return None

        limit = min(budget, room) - ack_size
        body: list[Frame] = []
        used = 0
        if limit >= MIN_FRAME_ROOM or (ps.pending and limit > 0):
            while ps.pending:
                frame = ps.pending[0]
                size = len(encode_frame(frame))
                if used + size <= limit:
                    body.append(ps.pending.pop(0))
                    used += size
                    continue
                if isinstance(frame, StreamFrame):
                    split = _split_stream_frame(frame, limit - used)
                    if split is not None:
                        ps.pending[0] = split[1]
                        body.append(split[0])
                        used += len(encode_frame(split[0]))
                break
            if ps.space is Space.APPLICATION and self._may_send_app_data():
                used = self._fill_stream_frames(body, used, limit)
        if not body:
            if ack is None or not ps.ack_due(now):
                return None
            return self._emit_packet(ps, [ack], now)
        frames = ([ack] if ack is not None else []) + body
        return self._emit_packet(ps, frames, now)

    def _fill_stream_frames(self, body: list[Frame], used: int, limit: int) -> int:
        side: list[Frame] = []
        while True:
            progressed = False
            for sid in self.streams.sendable():
                send = self.streams.get(sid).send
                max_data = limit - used - _stream_overhead(sid, send.next_offset, min(limit, 1 << 14))
                if max_data <= 0 and not (not send.queued and send.fin_requested):
                    continue
                frame, blocked = self.streams.next_frame(sid, max(max_data, 0), self._credit)
                side.extend(blocked)
                if frame is None:
                    continue
                body.append(frame)
                used += len(encode_frame(frame))
                self.streams.advance_round_robin()
                progressed = True
                break
            if not progressed or limit - used < MIN_FRAME_ROOM:
                break
        for frame in side:
            size = len(encode_frame(frame))
            if used + size <= limit:
                body.append(frame)
                used += size
            else:
                self.spaces[Space.APPLICATION].pending.append(frame)
        return used


def _credit_detail(frame: Union[MaxDataFrame, MaxStreamDataFrame]) -> dict:
    if isinstance(frame, MaxDataFrame):
        return {"scope": "conn", "limit": frame.limit}
    return {"scope": frame.stream_id, "limit": frame.limit}


def _blocked_detail(frame: Union[DataBlockedFrame, StreamDataBlockedFrame]) -> dict:
    if isinstance(frame, DataBlockedFrame):
        return {"scope": "conn", "at": frame.at_limit}
    return {"scope": frame.stream_id, "at": frame.at_limit}


# -- endpoint ----------------------------------------------------------------


class EndpointDemux:
    """Routes datagrams to connections by CID, or by path for zero-length CIDs."""

    def __init__(self) -> None:
        self.by_cid: dict[bytes, Connection] = {}
        self.fallback_by_path: dict[PathInfo, Connection] = {}
        self.retired: dict[bytes, None] = {}

    def register_cid(self, cid: bytes, conn: Connection) -> None:
        if cid in self.retired:
            raise ValueError(f"CID {cid.hex()} was retired and cannot be reused")
        holder = self.by_cid.get(cid)
        if holder is not None and holder is not conn:
            raise ValueError(f"CID {cid.hex()} already routes to {holder.label}")
        self.by_cid[cid] = conn

    def register_path(self, path: PathInfo, conn: Connection) -> None:
        self.fallback_by_path[path] = conn

    def lookup(self, dcid: bytes, path: PathInfo) -> Optional[Connection]:
        if dcid:
            return self.by_cid.get(dcid)
        return self.fallback_by_path.get(path)

    def release(self, conn: Connection) -> None:
        for cid in [c for c, holder in self.by_cid.items() if holder is conn]:
            del self.by_cid[cid]
            self.retired[cid] = None
        for path in [p for p, holder in self.fallback_by_path.items() if holder is conn]:
            del self.fallback_by_path[path]


class Endpoint:
    def __init__(
        self,
        label: str,
        address: Address,
        *,
        server: bool = False,
        config: Optional[ConnectionConfig] = None,
        seed: int = 0,
        trace: Optional[Trace] = None,
        token_cache: Optional[TokenCache] = None,
    ) -> None:
        self.label = label
        self.address = address
        self.is_server = server
        self.config = config if config is not None else ConnectionConfig()
        self.rng = random.Random(seed)
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.demux = EndpointDemux()
        self.token_cache = token_cache if token_cache is not None else TokenCache(self.config.token_lifetime)
        self.token_issuer = TokenIssuer(random.Random(seed ^ 0x70CE), self.config.token_lifetime) if server else None
        self.connections: list[Connection] = []
        self.issued_cids: dict[bytes, None] = {}
        self.events: list[Event] = []
        self.listeners: list[Callable[[Event, int], None]] = []
        self.demux_failures = 0
        self.dropped = 0
        self._seq = 0

    @property
    def active(self) -> list[Connection]:
        return [c for c in self.connections if not c.closed]

    def assign_cid(self, conn: Connection) -> ConnectionId:
        """A fresh CID for ``conn``, never issued before by this endpoint."""
        if self.config.zero_length_cid:
            self.demux.register_path(conn.path, conn)
            return ConnectionId(b"")
        while True:
            cid = ConnectionId(self.rng.randbytes(CID_LEN))
            if cid not in self.issued_cids and cid not in self.demux.retired:
                break
        self.issued_cids[cid] = None
        self.demux.register_cid(cid, conn)
        conn.add_local_cid(cid)
        return cid

    def _new_connection(self, *, is_client: bool, path: PathInfo, remote_cid: ConnectionId, now: int) -> Connection:
        self._seq += 1
        conn = Connection(
            label=f"{self.label}#{self._seq}",
            is_client=is_client,
            config=self.config,
            path=path,
            local_cid=ConnectionId(b""),
            remote_cid=remote_cid,
            now=now,
            trace=self.trace,
            token_cache=self.token_cache if is_client else None,
            token_issuer=self.token_issuer,
        )
        conn.local_cids.clear()
        conn.local_cid = self.assign_cid(conn)
        if self.config.zero_length_cid:
            conn.local_cids[conn.local_cid] = None
        self.connections.append(conn)
        return conn

    def connect(self, server: Address, now: int) -> Connection:
        path = PathInfo(self.address, server)
        initial_dcid = ConnectionId(self.rng.randbytes(CID_LEN))
        conn = self._new_connection(is_client=True, path=path, remote_cid=initial_dcid, now=now)
        conn.initiate(now)
        self._collect(conn, now)
        return conn

    def receive(self, datagram: bytes, remote: Address, now: int) -> None:
        try:
            parsed = parse_header(datagram, self.config.cid_length)
        except WireError:
            self.dropped += 1
            self.trace.record(now, self.label, "datagram_dropped", "reason=unparseable")
            return
        header = parsed.header
        path = PathInfo(self.address, remote)
        conn = self.demux.lookup(header.dcid, path)
        if conn is None and self.is_server and isinstance(header, LongHeader) and header.packet_type is PacketType.INITIAL:
            conn = self._new_connection(is_client=False, path=path, remote_cid=header.scid, now=now)
            # The client's randomly chosen first DCID keeps routing here.
            self.demux.register_cid(header.dcid, conn)
            self.trace.record(now, conn.label, "connection_created", f"remote={remote[0]}:{remote[1]}")
        if conn is None:
            self.demux_failures += 1
            event = DemuxFailure(self.label, bytes(header.dcid), remote)
            self.events.append(event)
            self._notify(event, now)
            self.trace.record(
                now, self.label, "demux_failure", format_detail(dcid=header.dcid.hex() or "-", remote=f"{remote[0]}:{remote[1]}")
            )
            return
        conn.receive(datagram, remote, now)
        self._collect(conn, now)

    def datagrams_to_send(self, now: int) -> list[tuple[bytes, Address]]:
        out = []
        for conn in self.active:
            remote = conn.path.remote
            for datagram in conn.datagrams_to_send(now):
                out.append((datagram, remote))
            self._collect(conn, now)
        return out

    def next_timer(self) -> Optional[int]:
        deadlines = [t for t in (c.next_timer() for c in self.active) if t is not None]
        return min(deadlines) if deadlines else None

    def handle_timer(self, now: int) -> None:
        for conn in self.active:
            deadline = conn.next_timer()
            if deadline is not None and deadline <= now:
                conn.handle_timer(now)
                self._collect(conn, now)

    def _notify(self, event: Event, now: int) -> None:
        for listener in self.listeners:
            listener(event, now)

    def _collect(self, conn: Connection, now: int) -> None:
        for event in conn.take_events():
            self.events.append(event)
            self._notify(event, now)
        if conn.closed:
            self.demux.release(conn)
