"""Credit-based flow control at stream and connection scope."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .wire import (
    ConnectionCloseFrame,
    DataBlockedFrame,
    Frame,
    MaxDataFrame,
    MaxStreamDataFrame,
    StreamDataBlockedFrame,
    StreamFrame,
)

FLOW_CONTROL_ERROR = 0x03
DEFAULT_STREAM_LIMIT = 16 * 1024
DEFAULT_CONNECTION_LIMIT = 64 * 1024
CREDIT_WINDOW_CAP = 1 << 20
RATE_SPAN = 8

CONNECTION_SCOPE = None  # scope key for connection-level state


class FlowControlViolation(Exception):
    """The peer sent past an advertised limit."""

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.frame = ConnectionCloseFrame(FLOW_CONTROL_ERROR, message.encode())


@dataclass
class StreamFlowState:
    send_limit: int = DEFAULT_STREAM_LIMIT
    sent_highest: int = 0
    recv_limit: int = DEFAULT_STREAM_LIMIT
    recv_highest: int = 0

    @property
    def send_headroom(self) -> int:
        return self.send_limit - self.sent_highest

    @property
    def recv_headroom(self) -> int:
        return self.recv_limit - self.recv_highest


@dataclass
class ConnectionFlowState:
    send_limit: int = DEFAULT_CONNECTION_LIMIT
    sent_total: int = 0
    recv_limit: int = DEFAULT_CONNECTION_LIMIT
    recv_total: int = 0

    @property
    def send_headroom(self) -> int:
        return self.send_limit - self.sent_total

    @property
    def recv_headroom(self) -> int:
        return self.recv_limit - self.recv_total


FlowState = Union[StreamFlowState, ConnectionFlowState]


@dataclass
class CreditPolicy:
    window: int
    rtt_estimate: float = 100_000
    last_issue: Optional[int] = None
    cap: int = CREDIT_WINDOW_CAP

    def __post_init__(self) -> None:
        if self.window <= 0:
            raise ValueError("credit window must be positive")


class ConsumptionRate:
    """Exponentially weighted delivery rate in bytes per microsecond.

    Deliveries at the same instant are folded into one sample.
    """

    def __init__(self, span: int = RATE_SPAN) -> None:
        self.alpha = 2 / (span + 1)
        self.rate = 0.0
        self._last_at: Optional[int] = None
        self._pending = 0

    def record(self, nbytes: int, now: int) -> None:
        if self._last_at is None:
            self._last_at = now
            self._pending = nbytes
            return
        if now == self._last_at:
            self._pending += nbytes
            return
        sample = (self._pending + nbytes) / (now - self._last_at)
        self.rate = sample if self.rate == 0 else self.alpha * sample + (1 - self.alpha) * self.rate
        self._last_at = now
        self._pending = 0

    @property
    def burst(self) -> int:
        """Bytes delivered at the latest instant, not yet folded into a sample."""
        return self._pending

    @property
    def value(self) -> float:
        # Before the clock has moved, a burst means "fast"; report it as such.
        if self.rate == 0 and self._pending:
            return float("inf")
        return self.rate

    def estimate(self, rtt: float) -> float:
        """Like ``value`` but an unmeasured burst counts as arriving over one RTT."""
        if self.rate == 0 and self._pending:
            return self._pending / max(rtt, 1.0)
        return self.rate


def maybe_issue_credit(
    state: FlowState,
    policy: CreditPolicy,
    consumption_rate: float,
    now: int,
    stream_id: Optional[int] = None,
) -> list[Frame]:
    """Raise the receive limit when the peer would exhaust it within two RTTs.

    The limit grows by the current window, and the window then doubles up to
    its cap.
    """
    if consumption_rate <= 0:
        return []
    if state.recv_headroom / consumption_rate >= 2 * policy.rtt_estimate:
        return []
    return [_raise_limit(state, policy, now, stream_id)]


def _raise_limit(state: FlowState, policy: CreditPolicy, now: int, stream_id: Optional[int]) -> Frame:
    state.recv_limit += policy.window
    policy.window = min(policy.window * 2, policy.cap)
    policy.last_issue = now
    if stream_id is None:
        return MaxDataFrame(state.recv_limit)
    return MaxStreamDataFrame(stream_id, state.recv_limit)


@dataclass
class FlowController:
    """Both directions of flow control for one connection."""

    stream_limit: int = DEFAULT_STREAM_LIMIT
    connection_limit: int = DEFAULT_CONNECTION_LIMIT
    autotune: bool = True
    connection: ConnectionFlowState = field(init=False)
    streams: dict[int, StreamFlowState] = field(default_factory=dict, init=False)
    policies: dict[Optional[int], CreditPolicy] = field(default_factory=dict, init=False)
    rates: dict[Optional[int], ConsumptionRate] = field(default_factory=dict, init=False)
    policy_latency_warnings: int = field(default=0, init=False)
    _blocked_signalled: set = field(default_factory=set, init=False)
    _dirty: dict[Optional[int], None] = field(default_factory=dict, init=False)
    _final_sizes: dict[int, int] = field(default_factory=dict, init=False)

    def __post_init__(self) -> None:
        self.connection = ConnectionFlowState(
            send_limit=self.connection_limit, recv_limit=self.connection_limit
        )
        self.policies[CONNECTION_SCOPE] = CreditPolicy(window=self.connection_limit)
        self.rates[CONNECTION_SCOPE] = ConsumptionRate()

    def stream(self, stream_id: int) -> StreamFlowState:
        state = self.streams.get(stream_id)
        if state is None:
            state = StreamFlowState(self.stream_limit, 0, self.stream_limit, 0)
            self.streams[stream_id] = state
            self.policies[stream_id] = CreditPolicy(window=self.stream_limit)
            self.rates[stream_id] = ConsumptionRate()
        return state

    # -- sending side --

    def consume_send_credit(self, stream_id: int, requested: int) -> tuple[int, list[Frame]]:
        """Grant up to ``requested`` new bytes on ``stream_id``.

        When the grant falls short, a blocked frame names the binding limit,
        at most once per (scope, limit value).
        """
        if requested <= 0:
            return 0, []
        s = self.stream(stream_id)
        c = self.connection
        stream_room = s.send_headroom
        conn_room = c.send_headroom
        granted = max(0, min(requested, stream_room, conn_room))
        s.sent_highest += granted
        c.sent_total += granted
        frames: list[Frame] = []
        if granted < requested:
            binding = min(stream_room, conn_room)
            if stream_room == binding:
                key = (stream_id, s.send_limit)
                if key not in self._blocked_signalled:
                    self._blocked_signalled.add(key)
                    frames.append(StreamDataBlockedFrame(stream_id, s.send_limit))
            if conn_room == binding:
                key = (CONNECTION_SCOPE, c.send_limit)
                if key not in self._blocked_signalled:
                    self._blocked_signalled.add(key)
                    frames.append(DataBlockedFrame(c.send_limit))
        return granted, frames

    def on_credit_frame(self, frame: Union[MaxDataFrame, MaxStreamDataFrame]) -> bool:
        """Apply a credit frame; non-increasing limits are ignored."""
        state: FlowState = self.connection if isinstance(frame, MaxDataFrame) else self.stream(frame.stream_id)
        if frame.limit <= state.send_limit:
            return False
        state.send_limit = frame.limit
        return True

    # -- receiving side --

    def enforce_receive_limit(self, frame: Frame) -> None:
        """Account a received frame, raising on a limit violation.

        Only STREAM frames are flow controlled.
        """
        if not isinstance(frame, StreamFrame):
            return
        s = self.stream(frame.stream_id)
        if frame.end > s.recv_limit:
            raise FlowControlViolation(
                f"stream {frame.stream_id} data to {frame.end} exceeds limit {s.recv_limit}"
            )
        growth = max(0, frame.end - s.recv_highest)
        if self.connection.recv_total + growth > self.connection.recv_limit:
            raise FlowControlViolation(
                f"connection data to {self.connection.recv_total + growth} "
                f"exceeds limit {self.connection.recv_limit}"
            )
        s.recv_highest += growth
        self.connection.recv_total += growth

    def record_delivery(self, stream_id: int, nbytes: int, now: int) -> None:
        self.stream(stream_id)
        self.rates[stream_id].record(nbytes, now)
        self.rates[CONNECTION_SCOPE].record(nbytes, now)
        self._dirty[stream_id] = None
        self._dirty[CONNECTION_SCOPE] = None

    def mark_final_size(self, stream_id: int, final_size: int) -> None:
        """A stream whose final size fits its limit never needs more credit."""
        self._final_sizes[stream_id] = final_size

    def issue_credit(self, now: int, rtt: float) -> list[Frame]:
        """Run the auto-tuner over every scope that saw deliveries since the last run."""
        dirty, self._dirty = self._dirty, {}
        if not self.autotune:
            return []
        frames: list[Frame] = []
        for scope in dirty:
            policy = self.policies[scope]
            policy.rtt_estimate = rtt
            if scope is CONNECTION_SCOPE:
                state: FlowState = self.connection
            else:
                state = self.streams[scope]
                final = self._final_sizes.get(scope)
                if final is not None and final <= state.recv_limit:
                    continue
            frames += maybe_issue_credit(state, policy, self.rates[scope].estimate(rtt), now, scope)
        return frames

    def on_blocked_frame(self, frame: Union[DataBlockedFrame, StreamDataBlockedFrame], now: int) -> list[Frame]:
        """The peer reports being blocked: issue credit at once if none is in flight."""
        if isinstance(frame, DataBlockedFrame):
            scope, state = CONNECTION_SCOPE, self.connection
        else:
            scope, state = frame.stream_id, self.stream(frame.stream_id)
        if state.recv_limit > frame.at_limit:
            return []
        self.policy_latency_warnings += 1
        return [_raise_limit(state, self.policies[scope], now, scope)]

    def current_credit_frame(self, frame: Union[MaxDataFrame, MaxStreamDataFrame]) -> Frame:
        """Refresh a lost credit frame to the latest limit."""
        if isinstance(frame, MaxDataFrame):
            return MaxDataFrame(self.connection.recv_limit)
        return MaxStreamDataFrame(frame.stream_id, self.stream(frame.stream_id).recv_limit)
