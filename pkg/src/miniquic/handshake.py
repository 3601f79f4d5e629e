"""Connection establishment: CHLO/REJ/CONFIRM messages and source-address tokens.

A fresh client sends an empty CHLO and gets a REJ carrying a source-address
token and server config; the retried CHLO carries the token together with
application data. A client holding a valid cached token sends its data in the
very first flight.

Message layout inside CRYPTO frames::

    CHLO    0x01 token_len:varint token
    REJ     0x02 token:16 address:4 port:2 issued_at:8 server_config:32
    CONFIRM 0x03
"""

from __future__ import annotations

import ipaddress
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional, Union

from .crypto import CipherHandle, Space
from .wire import WireError, decode_varint, encode_varint

TOKEN_LEN = 16
SERVER_CONFIG_LEN = 32
DEFAULT_TOKEN_LIFETIME = 24 * 3600 * 1_000_000

Address = tuple[str, int]


class HandshakeError(ValueError):
    pass


class MalformedChlo(HandshakeError):
    pass


class MalformedReject(HandshakeError):
    pass


class UnexpectedReply(HandshakeError):
    pass


class NoDataSent(HandshakeError):
    pass


class MessageTag(Enum):
    CHLO = 0x01
    REJ = 0x02
    CONFIRM = 0x03


@dataclass(frozen=True)
class SourceAddressToken:
    opaque: bytes
    bound_address: Address
    issued_at: int

    def valid_for(self, address: Address, now: int, lifetime: int = DEFAULT_TOKEN_LIFETIME) -> bool:
        return self.bound_address == address and now - self.issued_at <= lifetime


@dataclass(frozen=True)
class ClientHello:
    token: bytes = b""


@dataclass(frozen=True)
class Reject:
    token: SourceAddressToken
    server_config: bytes


@dataclass(frozen=True)
class Confirm:
    pass


Message = Union[ClientHello, Reject, Confirm]


def _pack_address(address: Address) -> bytes:
    host, port = address
    return ipaddress.IPv4Address(host).packed + struct.pack("!H", port)


def _unpack_address(raw: bytes) -> Address:
    return str(ipaddress.IPv4Address(raw[:4])), struct.unpack("!H", raw[4:6])[0]


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, ClientHello):
        return bytes((MessageTag.CHLO.value,)) + encode_varint(len(msg.token)) + msg.token
    if isinstance(msg, Reject):
        tok = msg.token
        if len(tok.opaque) != TOKEN_LEN or len(msg.server_config) != SERVER_CONFIG_LEN:
            raise ValueError("REJ token must be 16 bytes and server config 32 bytes")
        return b"".join(
            (
                bytes((MessageTag.REJ.value,)),
                tok.opaque,
                _pack_address(tok.bound_address),
                struct.pack("!Q", tok.issued_at),
                msg.server_config,
            )
        )
    if isinstance(msg, Confirm):
        return bytes((MessageTag.CONFIRM.value,))
    raise TypeError(f"not a handshake message: {msg!r}")


_REJ_LEN = 1 + TOKEN_LEN + 6 + 8 + SERVER_CONFIG_LEN


def decode_message(raw: bytes) -> Message:
    if not raw:
        raise HandshakeError("empty handshake message")
    tag = raw[0]
    if tag == MessageTag.CHLO.value:
        try:
            length, used = decode_varint(raw, 1)
        except WireError as exc:
            raise MalformedChlo(str(exc)) from None
        token = raw[1 + used : 1 + used + length]
        if len(token) != length or 1 + used + length != len(raw):
            raise MalformedChlo("CHLO token length mismatch")
        return ClientHello(bytes(token))
    if tag == MessageTag.REJ.value:
        if len(raw) != _REJ_LEN:
            raise MalformedReject(f"REJ is {len(raw)} bytes, expected {_REJ_LEN}")
        opaque = bytes(raw[1:17])
        address = _unpack_address(raw[17:23])
        issued_at = struct.unpack("!Q", raw[23:31])[0]
        return Reject(SourceAddressToken(opaque, address, issued_at), bytes(raw[31:63]))
    if tag == MessageTag.CONFIRM.value:
        return Confirm()
    raise HandshakeError(f"unknown handshake message tag 0x{tag:02x}")


# -- token storage -----------------------------------------------------------


@dataclass
class CachedCredentials:
    token: SourceAddressToken
    server_config: bytes


class TokenCache:
    """Client-side credentials, one entry per server identity."""

    def __init__(self, lifetime: int = DEFAULT_TOKEN_LIFETIME) -> None:
        self.lifetime = lifetime
        self.entries: dict[Address, CachedCredentials] = {}

    def store(self, server: Address, reject: Reject) -> None:
        self.entries[server] = CachedCredentials(reject.token, reject.server_config)

    def lookup(self, server: Address, now: int) -> Optional[CachedCredentials]:
        entry = self.entries.get(server)
        if entry is None or now - entry.token.issued_at > self.lifetime:
            return None
        return entry


class TokenIssuer:
    """Server-side record of issued tokens."""

    def __init__(self, rng: random.Random, lifetime: int = DEFAULT_TOKEN_LIFETIME) -> None:
        self.rng = rng
        self.lifetime = lifetime
        self.server_config = rng.randbytes(SERVER_CONFIG_LEN)
        self.issued: dict[bytes, SourceAddressToken] = {}

    def issue(self, address: Address, now: int) -> Reject:
        token = SourceAddressToken(self.rng.randbytes(TOKEN_LEN), address, now)
        self.issued[token.opaque] = token
        return Reject(token, self.server_config)

    def validate(self, opaque: bytes, address: Address, now: int) -> bool:
        token = self.issued.get(opaque)
        return token is not None and token.valid_for(address, now, self.lifetime)


# -- handshake state ---------------------------------------------------------


class Phase(Enum):
    IDLE = "idle"
    AWAITING_REJECT = "awaiting_reject"
    AWAITING_CONFIRM = "awaiting_confirm"
    ESTABLISHED = "established"


class Decision(Enum):
    REJECTED = "rejected"
    ACCEPTED = "accepted"


@dataclass
class HandshakeState:
    phase: Phase = Phase.IDLE
    keys: dict[Space, CipherHandle] = field(default_factory=lambda: {Space.INITIAL: CipherHandle(Space.INITIAL)})
    zero_rtt_attempted: bool = False

    def install(self, *spaces: Space) -> None:
        for space in spaces:
            self.keys.setdefault(space, CipherHandle(space))

    @property
    def may_send_application_data(self) -> bool:
        return self.phase is Phase.ESTABLISHED or (
            self.zero_rtt_attempted and Space.APPLICATION in self.keys
        )


# -- RTT accounting ----------------------------------------------------------


class TraceEvent(NamedTuple):
    time: int
    kind: str


HANDSHAKE_START = "handshake_start"
APP_DATA_SENT = "app_data_sent"


def rtt_to_first_data(trace: Iterable, rtt: int) -> Fraction:
    """Round trips between handshake start and the first application byte sent.

    ``trace`` is any ordered iterable of records with ``time`` and ``kind``.
    """
    start = None
    for event in trace:
        if event.kind == HANDSHAKE_START and start is None:
            start = event.time
        elif event.kind == APP_DATA_SENT and start is not None:
            return Fraction(event.time - start, rtt)
    raise NoDataSent("trace holds no application data after handshake start")
