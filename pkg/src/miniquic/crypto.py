"""Null cipher with per-space key labels.

Payloads travel in the clear. Each packet carries a short keyed tag derived
from the packet-number space label, so a packet protected for one space fails
authentication when opened with another space's handle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Mapping, Union

TAG_LEN = 8


class Space(IntEnum):
    """Packet-number spaces; each one doubles as a key label."""

    INITIAL = 0
    HANDSHAKE = 1
    APPLICATION = 2


class AuthFailure(ValueError):
    """Raised when a payload does not authenticate under the given key."""


@lru_cache(maxsize=None)
def _keyed_hash(space: Space) -> "hashlib._Hash":
    return hashlib.blake2b(digest_size=TAG_LEN, key=b"miniquic/" + space.name.encode())


@dataclass(frozen=True)
class CipherHandle:
    space_label: Space

    def _tag(self, aad: bytes, payload: bytes) -> bytes:
        h = _keyed_hash(self.space_label).copy()
        h.update(len(aad).to_bytes(4, "big"))
        h.update(aad)
        h.update(payload)
        return h.digest()

    def protect(self, payload: bytes, aad: bytes = b"") -> bytes:
        return payload + self._tag(aad, payload)

    def unprotect(self, protected: bytes, aad: bytes = b"") -> bytes:
        if len(protected) < TAG_LEN:
            raise AuthFailure("protected payload shorter than tag")
        payload, tag = protected[:-TAG_LEN], protected[-TAG_LEN:]
        if self._tag(aad, payload) != tag:
            raise AuthFailure(f"tag mismatch under {self.space_label.name} key")
        return payload


Keyring = Mapping[Space, CipherHandle]
CipherLike = Union[CipherHandle, Keyring]


def keyring(*spaces: Space) -> dict[Space, CipherHandle]:
    return {space: CipherHandle(space) for space in spaces}


def select_handle(cipher: CipherLike, space: Space) -> CipherHandle:
    """Return the handle to use for ``space``.

    A bare handle is used as-is (and will fail authentication if it belongs to
    a different space); a keyring must hold an installed key for ``space``.
    """
    if isinstance(cipher, CipherHandle):
        return cipher
    handle = cipher.get(space)
    if handle is None:
        raise AuthFailure(f"no {space.name} key installed")
    return handle
