"""Per-window acknowledgement tokens.

A token binds a window index to the session's DH secret and metafile
nonce, so only a peer that completed the key exchange can produce it.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field

from .crypto import SharedSecret

TOKEN_SIZE = 16
NONCE_SIZE = 16
MAX_WINDOW_INDEX = 0xFFFFFFFF


@dataclass(frozen=True)
class AckToken:
    window_index: int
    value: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.window_index <= MAX_WINDOW_INDEX:
            raise ValueError("window index must fit in 32 bits")
        if len(self.value) != TOKEN_SIZE:
            raise ValueError(f"token value must be {TOKEN_SIZE} bytes")


def _secret_bytes(secret: SharedSecret | bytes) -> bytes:
    return secret.bytes if isinstance(secret, SharedSecret) else bytes(secret)


def derive_token(secret: SharedSecret | bytes, token_nonce: bytes, window_index: int) -> AckToken:
    if len(token_nonce) != NONCE_SIZE:
        raise ValueError(f"token nonce must be {NONCE_SIZE} bytes")
    h = hashlib.sha256()
    h.update(_secret_bytes(secret))
    h.update(token_nonce)
    h.update(window_index.to_bytes(4, "big"))
    return AckToken(window_index, h.digest()[:TOKEN_SIZE])


class Verdict(enum.Enum):
    ACCEPT = "accept"
    INVALID = "invalid"
    REPLAY = "replay"


@dataclass
class TokenVerifier:
    """Server-side check for one session.

    Windows are accepted strictly in order, each at most once.
    """

    secret: SharedSecret | bytes
    token_nonce: bytes
    accepted: set[int] = field(default_factory=set)
    expected: int = 0

    def copy(self) -> "TokenVerifier":
        return TokenVerifier(self.secret, self.token_nonce, set(self.accepted), self.expected)


def verify_token(verifier: TokenVerifier, token: AckToken) -> Verdict:
    if token.window_index in verifier.accepted:
        return Verdict.REPLAY
    want = derive_token(verifier.secret, verifier.token_nonce, token.window_index)
    # Compare before the ordering check so timing does not depend on which rule fails.
    matches = hmac.compare_digest(want.value, token.value)
    if token.window_index != verifier.expected or not matches:
        return Verdict.INVALID
    verifier.accepted.add(token.window_index)
    verifier.expected += 1
    return Verdict.ACCEPT
