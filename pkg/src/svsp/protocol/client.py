"""Client side of a streaming session as a pure transition function.

The honest client returns one token per completed window.  The same
machine also drives the attacker harnesses: they speak the protocol
faithfully but withhold tokens or substitute captured ones.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

from ..crypto import (
    CryptoError,
    DhKeyPair,
    DhParams,
    DEFAULT_DH_PARAMS,
    RsaKeyPair,
    SharedSecret,
    dh_shared,
    rsa_decrypt_bytes,
)
from ..tokens import derive_token
from .codec import (
    MAX_NACK_SEQS,
    AckTokenMsg,
    Chunk,
    DecodeError,
    Fin,
    Halt,
    Hello,
    HelloReply,
    HelloStatus,
    Metafile,
    Nack,
    SessionMetafile,
)
from .events import (
    GAP_TIMER,
    HELLO_TIMER,
    RETRY_TIMER,
    Action,
    ArmTimer,
    CancelTimer,
    Deliver,
    Event,
    Note,
    Received,
    Send,
    Start,
    TimerExpired,
)

# Chunks that arrive before the metafile is readable are held up to this many.
EARLY_CHUNK_CAP = 4096


@dataclass(frozen=True)
class HonestTokens:
    pass


@dataclass(frozen=True)
class WithholdTokens:
    pass


@dataclass(frozen=True)
class ReplayTokens:
    """Present token values captured from another session, by window index."""

    captured: Mapping[int, bytes]


TokenPolicy = Union[HonestTokens, WithholdTokens, ReplayTokens]


@dataclass(frozen=True)
class ClientParams:
    gap_ms: int = 250
    token_retry_ms: int = 250
    hello_retry_ms: int = 250
    idle_timeout_ms: int = 10_000
    policy: TokenPolicy = HonestTokens()


@dataclass(frozen=True)
class SentHello:
    pass


@dataclass(frozen=True)
class AwaitMetafile:
    pass


@dataclass(frozen=True)
class Receiving:
    w: int
    received: frozenset[int] = frozenset()


@dataclass(frozen=True)
class SentToken:
    w: int
    # Retry-timer expiries since the token went out; odd ones probe, even ones resend.
    retries: int = 0


@dataclass(frozen=True)
class Done:
    pass


@dataclass(frozen=True)
class Aborted:
    reason: str
    # True when the server ended the session with a Halt message.
    halted: bool = False


ClientPhase = Union[SentHello, AwaitMetafile, Receiving, SentToken, Done, Aborted]


@dataclass(frozen=True)
class ClientStats:
    chunks_received: int = 0
    bytes_received: int = 0
    chunks_retransmitted: int = 0
    duplicate_chunks: int = 0
    crc_errors: int = 0
    nacks_sent: int = 0
    tokens_sent: int = 0
    hellos_sent: int = 0


@dataclass(frozen=True)
class ClientSession:
    content_name: str
    rsa: RsaKeyPair = field(repr=False)
    dh: DhKeyPair = field(repr=False)
    dh_params: DhParams = DEFAULT_DH_PARAMS
    params: ClientParams = ClientParams()
    phase: ClientPhase = SentHello()
    session_id: Optional[int] = None
    secret: Optional[SharedSecret] = field(default=None, repr=False)
    meta: Optional[SessionMetafile] = None
    meta_blocks: Mapping[int, bytes] = field(default_factory=dict, repr=False)
    meta_total: Optional[int] = None
    # seq -> payload for chunks not yet delivered
    pending: Mapping[int, bytes] = field(default_factory=dict, repr=False)
    delivered: tuple[bytes, ...] = field(default=(), repr=False)
    nacked: frozenset[int] = field(default=frozenset(), repr=False)
    sent_tokens: Mapping[int, bytes] = field(default_factory=dict, repr=False)
    idle_ms: int = 0
    stats: ClientStats = ClientStats()

    @property
    def terminal(self) -> bool:
        return isinstance(self.phase, (Done, Aborted))

    @property
    def hello(self) -> Hello:
        return Hello(self.content_name, self.dh.public, self.rsa.n, self.rsa.e)

    @property
    def content(self) -> bytes:
        return b"".join(self.delivered)


def new_client_session(content_name: str, rsa: RsaKeyPair, dh: DhKeyPair,
                       dh_params: DhParams = DEFAULT_DH_PARAMS,
                       params: ClientParams = ClientParams()) -> ClientSession:
    return ClientSession(content_name, rsa, dh, dh_params, params)


Step = tuple[ClientSession, list[Action]]


def _abort(c: ClientSession, reason: str, halted: bool = False) -> Step:
    return replace(c, phase=Aborted(reason, halted)), [
        CancelTimer(HELLO_TIMER), CancelTimer(GAP_TIMER), CancelTimer(RETRY_TIMER),
        Note(f"aborted: {reason}"),
    ]


def _bump(c: ClientSession, **delta: int) -> ClientSession:
    stats = replace(c.stats, **{k: getattr(c.stats, k) + v for k, v in delta.items()})
    return replace(c, stats=stats)


def _missing(c: ClientSession, w: int) -> list[int]:
    return [seq for seq in c.meta.window_seqs(w) if seq not in c.pending]


def _token_message(c: ClientSession, w: int) -> Optional[AckTokenMsg]:
    policy = c.params.policy
    if isinstance(policy, HonestTokens):
        value = derive_token(c.secret, c.meta.token_nonce, w).value
    elif isinstance(policy, ReplayTokens) and w in policy.captured:
        value = policy.captured[w]
    else:
        return None
    return AckTokenMsg(w, value, c.session_id)


def _send_token(c: ClientSession, w: int) -> Step:
    msg = _token_message(c, w)
    if msg is None:
        # Attackers keep the session visible so a lost Halt gets repeated.
        return _bump(c, nacks_sent=1), [Send(Nack((), c.session_id))]
    c = replace(c, sent_tokens={**c.sent_tokens, w: msg.value})
    return _bump(c, tokens_sent=1), [Send(msg)]


def _next_window_probe(c: ClientSession, w: int) -> tuple[int, ...]:
    if w < 0 or w + 1 >= c.meta.total_windows:
        return ()
    return tuple(c.meta.window_seqs(w + 1))[:MAX_NACK_SEQS]


def _enter_window(c: ClientSession, w: int) -> Step:
    """Start collecting window ``w``; completes at once if already held."""
    c = replace(c, phase=Receiving(w, frozenset(s for s in c.meta.window_seqs(w) if s in c.pending)))
    actions: list[Action] = [CancelTimer(RETRY_TIMER), ArmTimer(GAP_TIMER, c.params.gap_ms)]
    if c.meta.total_chunks == 0 or not _missing(c, w):
        c, more = _complete_window(c, w)
        actions += more
    return c, actions


def _complete_window(c: ClientSession, w: int) -> Step:
    actions: list[Action] = [CancelTimer(GAP_TIMER)]
    seqs = c.meta.window_seqs(w)
    if seqs:
        data = b"".join(c.pending[s] for s in seqs)
        pending = {k: v for k, v in c.pending.items() if k not in seqs}
        c = replace(c, pending=pending, delivered=c.delivered + (data,))
        actions.append(Deliver(data))
        c = replace(c, phase=SentToken(w))
        c, more = _send_token(c, w)
        actions += more
    else:
        # Empty content: nothing to acknowledge, only the Fin is awaited.
        c = replace(c, phase=SentToken(-1))
        actions.append(Send(Nack((), c.session_id)))
        c = _bump(c, nacks_sent=1)
    actions.append(ArmTimer(RETRY_TIMER, c.params.token_retry_ms))
    return c, actions


def _maybe_begin(c: ClientSession) -> Step:
    """Move to window 0 once both the DH reply and the metafile are in."""
    if c.secret is None or c.meta_total is None or len(c.meta_blocks) < c.meta_total:
        if c.secret is not None and isinstance(c.phase, SentHello):
            return replace(c, phase=AwaitMetafile()), []
        return c, []
    if c.meta is None:
        width = (c.rsa.n.bit_length() + 7) // 8
        try:
            blocks = [int.from_bytes(c.meta_blocks[i], "big") for i in range(c.meta_total)]
            if any(len(c.meta_blocks[i]) != width for i in range(c.meta_total)):
                raise ValueError("ciphertext block width mismatch")
            meta = SessionMetafile.unpack(rsa_decrypt_bytes(blocks, c.rsa))
        except (CryptoError, DecodeError, ValueError) as exc:
            return _abort(c, f"internal: metafile unreadable ({exc})")
        early = {s: p for s, p in c.pending.items()
                 if s < meta.total_chunks and len(p) == meta.chunk_length(s)}
        c = replace(c, meta=meta, pending=early)
    c = replace(c, idle_ms=0)
    c, actions = _enter_window(c, 0)
    return c, [CancelTimer(HELLO_TIMER), Note("metafile decrypted")] + actions


def _on_hello_reply(c: ClientSession, msg: HelloReply) -> Step:
    if c.secret is not None:
        return c, []
    if msg.status is HelloStatus.NOT_FOUND:
        return _abort(c, "not_found")
    try:
        secret = dh_shared(c.dh, msg.dh_public, c.dh_params)
    except CryptoError as exc:
        return _abort(c, f"internal: {exc}")
    c = replace(c, secret=secret, session_id=msg.session_id, idle_ms=0)
    return _maybe_begin(c)


def _on_metafile(c: ClientSession, msg: Metafile) -> Step:
    if c.meta is not None:
        return c, []
    if c.meta_total is not None and msg.total_blocks != c.meta_total:
        return c, [Note("metafile slice disagrees on block count")]
    if msg.total_blocks == 0 or msg.first_index + len(msg.blocks) > msg.total_blocks:
        return c, [Note("malformed metafile slice")]
    blocks = dict(c.meta_blocks)
    for i, b in enumerate(msg.blocks):
        blocks[msg.first_index + i] = b
    c = replace(c, meta_blocks=blocks, meta_total=msg.total_blocks)
    if c.session_id is None:
        c = replace(c, session_id=msg.session_id)
    return _maybe_begin(c)


def _on_chunk(c: ClientSession, msg: Chunk) -> Step:
    if not msg.crc_ok():
        return _bump(c, crc_errors=1), [Note(f"chunk {msg.seq} failed CRC")]
    phase = c.phase
    if c.meta is None:
        if msg.seq in c.pending or len(c.pending) >= EARLY_CHUNK_CAP:
            return _bump(c, duplicate_chunks=1), []
        c = replace(c, pending={**c.pending, msg.seq: msg.payload})
        return _bump(c, chunks_received=1, bytes_received=len(msg.payload)), []

    meta = c.meta
    if msg.seq >= meta.total_chunks or len(msg.payload) != meta.chunk_length(msg.seq):
        return c, [Note(f"chunk {msg.seq} outside content")]
    target = meta.window_of(msg.seq)
    if isinstance(phase, SentToken) and target == phase.w + 1:
        c, actions = _store(c, msg)
        c2, more = _enter_window(c, target)
        return c2, actions + more
    if isinstance(phase, Receiving) and target == phase.w:
        if msg.seq in c.pending:
            return _bump(c, duplicate_chunks=1), []
        c, actions = _store(c, msg)
        c = replace(c, phase=Receiving(phase.w, phase.received | {msg.seq}))
        if not _missing(c, phase.w):
            c, more = _complete_window(c, phase.w)
            actions += more
        return c, actions
    return _bump(c, duplicate_chunks=1), []


def _store(c: ClientSession, msg: Chunk) -> Step:
    c = replace(c, pending={**c.pending, msg.seq: msg.payload}, idle_ms=0)
    delta = {"chunks_received": 1, "bytes_received": len(msg.payload)}
    if msg.seq in c.nacked:
        delta["chunks_retransmitted"] = 1
    return _bump(c, **delta), []


def _on_fin(c: ClientSession, msg: Fin) -> Step:
    meta = c.meta
    if meta is None or not isinstance(c.phase, SentToken):
        return c, [Note("early fin ignored")]
    if c.phase.w != meta.total_windows - 1:
        return c, [Note("fin before last window ignored")]
    digest = hashlib.sha256(c.content).digest()
    if digest != meta.content_sha256 or msg.content_sha256 != meta.content_sha256:
        return _abort(c, "internal: checksum mismatch")
    return replace(c, phase=Done()), [
        CancelTimer(RETRY_TIMER), CancelTimer(GAP_TIMER), Note("done")]


def _on_timer(c: ClientSession, timer: str) -> Step:
    phase = c.phase
    if timer == HELLO_TIMER and isinstance(phase, (SentHello, AwaitMetafile)):
        delay = c.params.hello_retry_ms
        c = replace(c, idle_ms=c.idle_ms + delay)
        if c.idle_ms >= c.params.idle_timeout_ms:
            return _abort(c, "timeout")
        c = _bump(c, hellos_sent=1)
        return c, [Send(c.hello), ArmTimer(HELLO_TIMER, delay)]
    if timer == GAP_TIMER and isinstance(phase, Receiving):
        delay = c.params.gap_ms
        c = replace(c, idle_ms=c.idle_ms + delay)
        if c.idle_ms >= c.params.idle_timeout_ms:
            return _abort(c, "timeout")
        missing = tuple(_missing(c, phase.w)[:MAX_NACK_SEQS])
        c = replace(c, nacked=c.nacked | set(missing))
        c = _bump(c, nacks_sent=1)
        return c, [Send(Nack(missing, c.session_id)), ArmTimer(GAP_TIMER, delay)]
    if timer == RETRY_TIMER and isinstance(phase, SentToken):
        delay = c.params.token_retry_ms
        c = replace(c, idle_ms=c.idle_ms + delay)
        if c.idle_ms >= c.params.idle_timeout_ms:
            return _abort(c, "timeout")
        c = replace(c, phase=replace(phase, retries=phase.retries + 1))
        if phase.w < 0 or phase.retries % 2 == 0:
            # If the token did arrive, re-presenting it would halt us as a
            # replay; ask for the next window instead, which is a no-op for a
            # server still waiting on the token.
            c = _bump(c, nacks_sent=1)
            probe = _next_window_probe(c, phase.w)
            return c, [Send(Nack(probe, c.session_id)), ArmTimer(RETRY_TIMER, delay)]
        c, actions = _send_token(c, phase.w)
        return c, actions + [ArmTimer(RETRY_TIMER, delay)]
    return c, []


def client_step(session: ClientSession, event: Event) -> Step:
    c = session
    if isinstance(c.phase, (Done, Aborted)):
        return c, []
    if isinstance(event, Start):
        if not isinstance(c.phase, SentHello) or c.stats.hellos_sent:
            return c, []
        c = _bump(c, hellos_sent=1)
        return c, [Send(c.hello), ArmTimer(HELLO_TIMER, c.params.hello_retry_ms)]
    if isinstance(event, TimerExpired):
        return _on_timer(c, event.timer)

    msg = event.message
    if c.session_id is not None and msg.session_id != c.session_id:
        return c, [Note(f"message for session {msg.session_id} ignored")]
    if isinstance(msg, HelloReply):
        return _on_hello_reply(c, msg)
    if isinstance(msg, Metafile):
        return _on_metafile(c, msg)
    if isinstance(msg, Chunk):
        return _on_chunk(c, msg)
    if isinstance(msg, Halt):
        return _abort(c, msg.reason.name.lower(), halted=True)
    if isinstance(msg, Fin):
        return _on_fin(c, msg)
    return c, [Note(f"unexpected {type(msg).__name__}")]
