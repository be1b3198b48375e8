"""Server side of a streaming session as a pure transition function.

``server_step(session, event)`` returns a new :class:`ServerSession` and the
actions to perform; the input session is never modified.  The server only
ever emits chunks of its current window, and it moves to the next window
only after that window's token verifies.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

from ..crypto import (
    CryptoError,
    DhKeyPair,
    DhParams,
    DEFAULT_DH_PARAMS,
    RsaPublicKey,
    byte_length,
    dh_shared,
    rsa_block_capacity,
    rsa_encrypt_bytes,
)
from ..tokens import AckToken, TokenVerifier, Verdict, verify_token
from .codec import (
    HEADER_SIZE,
    MAX_DATAGRAM,
    AckTokenMsg,
    Chunk,
    Fin,
    Halt,
    HaltReason,
    Hello,
    HelloReply,
    HelloStatus,
    Message,
    Metafile,
    Nack,
    SessionMetafile,
    build_metafile,
)
from .events import (
    TOKEN_TIMER,
    Action,
    ArmTimer,
    CancelTimer,
    Event,
    Note,
    Received,
    Send,
    Start,
    TimerExpired,
)

ContentLookup = Callable[[str], Optional[bytes]]


@dataclass(frozen=True)
class ServerParams:
    chunk_size: int = 1024
    window_size: int = 32
    token_timeout_ms: int = 2000
    max_pokes: int = 3
    dh_params: DhParams = DEFAULT_DH_PARAMS

    def __post_init__(self) -> None:
        if self.chunk_size < 1 or self.window_size < 1:
            raise ValueError("chunk_size and window_size must be positive")
        if self.token_timeout_ms < 1:
            raise ValueError("token_timeout_ms must be >= 1")
        if self.max_pokes < 0:
            raise ValueError("max_pokes must be >= 0")


@dataclass(frozen=True)
class AwaitHello:
    pass


@dataclass(frozen=True)
class StreamingWindow:
    w: int
    outstanding: frozenset[int] = frozenset()


@dataclass(frozen=True)
class AwaitToken:
    w: int
    pokes_sent: int


@dataclass(frozen=True)
class Finished:
    pass


@dataclass(frozen=True)
class Halted:
    # None: closed without a Halt (e.g. unknown content).
    reason: Optional[HaltReason]


ServerPhase = Union[AwaitHello, StreamingWindow, AwaitToken, Finished, Halted]


@dataclass(frozen=True)
class ServerStats:
    chunks_sent: int = 0
    chunks_retransmitted: int = 0
    pokes_sent: int = 0
    tokens_accepted: int = 0


@dataclass(frozen=True)
class ServerSession:
    params: ServerParams
    session_id: int
    dh: DhKeyPair
    token_nonce: bytes
    lookup: ContentLookup = field(repr=False, compare=False)
    phase: ServerPhase = AwaitHello()
    hello: Optional[Hello] = None
    content: Optional[bytes] = field(default=None, repr=False)
    meta: Optional[SessionMetafile] = None
    handshake: tuple[Message, ...] = field(default=(), repr=False)
    verifier: Optional[TokenVerifier] = field(default=None, repr=False)
    stats: ServerStats = ServerStats()

    @property
    def terminal(self) -> bool:
        return isinstance(self.phase, (Finished, Halted))


def new_server_session(params: ServerParams, session_id: int, dh: DhKeyPair,
                       token_nonce: bytes, lookup: ContentLookup) -> ServerSession:
    if len(token_nonce) != 16:
        raise ValueError("token nonce must be 16 bytes")
    return ServerSession(params, session_id, dh, bytes(token_nonce), lookup)


def _chunk(s: ServerSession, seq: int) -> Chunk:
    size = s.params.chunk_size
    return Chunk.make(seq, s.content[seq * size:(seq + 1) * size], s.session_id)


def _metafile_messages(blocks: list[bytes], session_id: int) -> list[Metafile]:
    per_msg = max(1, (MAX_DATAGRAM - HEADER_SIZE - 6) // (len(blocks[0]) + 2))
    return [Metafile(len(blocks), i, tuple(blocks[i:i + per_msg]), session_id)
            for i in range(0, len(blocks), per_msg)]


def _halt(s: ServerSession, reason: HaltReason, why: str) -> tuple[ServerSession, list[Action]]:
    return replace(s, phase=Halted(reason)), [
        Note(f"halt {reason.name.lower()}: {why}"),
        Send(Halt(reason, s.session_id)),
        CancelTimer(TOKEN_TIMER),
    ]


def _open_window(s: ServerSession, w: int) -> tuple[ServerSession, list[Action]]:
    seqs = s.meta.window_seqs(w)
    actions: list[Action] = [Send(_chunk(s, seq)) for seq in seqs]
    actions.append(ArmTimer(TOKEN_TIMER, s.params.token_timeout_ms))
    stats = replace(s.stats, chunks_sent=s.stats.chunks_sent + len(seqs))
    return replace(s, phase=StreamingWindow(w, frozenset(seqs)), stats=stats), actions


def _finish(s: ServerSession) -> tuple[ServerSession, list[Action]]:
    return replace(s, phase=Finished()), [
        Send(Fin(s.meta.content_sha256, s.session_id)),
        CancelTimer(TOKEN_TIMER),
        Note("finished"),
    ]


def _handshake(s: ServerSession, hello: Hello) -> tuple[ServerSession, list[Action]]:
    content = s.lookup(hello.content_name)
    if content is None:
        reply = HelloReply(0, HelloStatus.NOT_FOUND, s.session_id)
        return replace(s, phase=Halted(None), hello=hello), [
            Send(reply), Note(f"content {hello.content_name!r} not found")]
    p = s.params
    try:
        client_key = RsaPublicKey(hello.rsa_n, hello.rsa_e)
        if rsa_block_capacity(client_key.n) < 3:
            raise CryptoError("client modulus too small")
        secret = dh_shared(s.dh, hello.dh_public, p.dh_params)
    except (CryptoError, ValueError) as exc:
        return _halt(replace(s, hello=hello), HaltReason.INTERNAL, f"bad hello: {exc}")
    meta = build_metafile(content, p.chunk_size, p.window_size, s.token_nonce)
    width = byte_length(client_key.n)
    blocks = [c.to_bytes(width, "big") for c in rsa_encrypt_bytes(meta.pack(), client_key)]
    handshake: tuple[Message, ...] = (HelloReply(s.dh.public, HelloStatus.OK, s.session_id),
                                      *_metafile_messages(blocks, s.session_id))
    s = replace(s, hello=hello, content=content, meta=meta, handshake=handshake,
                verifier=TokenVerifier(secret, s.token_nonce))
    actions: list[Action] = [Note(f"hello for {hello.content_name!r}: "
                                  f"{meta.total_chunks} chunks, {meta.total_windows} windows")]
    actions += [Send(m) for m in handshake]
    if meta.total_chunks == 0:
        s, more = _finish(s)
    else:
        s, more = _open_window(s, 0)
    return s, actions + more


def _current_window(phase: ServerPhase) -> tuple[int, int]:
    if isinstance(phase, StreamingWindow):
        return phase.w, 0
    return phase.w, phase.pokes_sent


def _on_token(s: ServerSession, msg: AckTokenMsg) -> tuple[ServerSession, list[Action]]:
    w, _ = _current_window(s.phase)
    verifier = s.verifier.copy()
    verdict = verify_token(verifier, AckToken(msg.window_index, msg.value))
    s = replace(s, verifier=verifier)
    if verdict is Verdict.REPLAY:
        return _halt(s, HaltReason.REPLAY, f"window {msg.window_index} already accepted")
    if verdict is Verdict.INVALID:
        return _halt(s, HaltReason.TOKEN_INVALID, f"bad token for window {msg.window_index} "
                                                  f"while awaiting {w}")
    s = replace(s, stats=replace(s.stats, tokens_accepted=s.stats.tokens_accepted + 1))
    note = Note(f"token {w} accepted")
    if w + 1 >= s.meta.total_windows:
        s, actions = _finish(s)
    else:
        s, actions = _open_window(s, w + 1)
    return s, [note] + actions


def _on_nack(s: ServerSession, msg: Nack) -> tuple[ServerSession, list[Action]]:
    w, _ = _current_window(s.phase)
    window = s.meta.window_seqs(w)
    seqs = sorted({seq for seq in msg.missing_seqs if seq in window})
    if len(seqs) < len(set(msg.missing_seqs)):
        note = [Note(f"nack outside window {w} ignored in part")]
    else:
        note = []
    stats = replace(s.stats, chunks_retransmitted=s.stats.chunks_retransmitted + len(seqs))
    return replace(s, stats=stats), note + [Send(_chunk(s, seq)) for seq in seqs]


def _on_timer(s: ServerSession) -> tuple[ServerSession, list[Action]]:
    w, pokes = _current_window(s.phase)
    if pokes >= s.params.max_pokes:
        return _halt(s, HaltReason.TOKEN_TIMEOUT, f"no token for window {w} after {pokes} pokes")
    last = s.meta.window_seqs(w)[-1]
    stats = replace(s.stats, pokes_sent=s.stats.pokes_sent + 1)
    return replace(s, phase=AwaitToken(w, pokes + 1), stats=stats), [
        Send(_chunk(s, last)),
        ArmTimer(TOKEN_TIMER, s.params.token_timeout_ms),
        Note(f"poke {pokes + 1} for window {w}"),
    ]


def _ignore(s: ServerSession, why: str) -> tuple[ServerSession, list[Action]]:
    return s, [Note(f"ignored {why} in {type(s.phase).__name__}")]


def server_step(session: ServerSession, event: Event) -> tuple[ServerSession, list[Action]]:
    s = session
    phase = s.phase
    if isinstance(event, Start):
        return s, []
    if isinstance(event, TimerExpired):
        if event.timer == TOKEN_TIMER and isinstance(phase, (StreamingWindow, AwaitToken)):
            return _on_timer(s)
        return _ignore(s, f"timer {event.timer}")

    msg = event.message
    if isinstance(phase, AwaitHello):
        if isinstance(msg, Hello):
            return _handshake(s, msg)
        return _ignore(s, type(msg).__name__)

    if isinstance(msg, Hello):
        if msg == s.hello and s.handshake:
            return s, [Send(m) for m in s.handshake]
        return _ignore(s, "foreign hello")
    if msg.session_id != s.session_id:
        return _ignore(s, f"message for session {msg.session_id}")

    # Terminal states answer client traffic with their closing message.
    if isinstance(phase, Finished):
        if isinstance(msg, (AckTokenMsg, Nack)):
            return s, [Send(Fin(s.meta.content_sha256, s.session_id))]
        return _ignore(s, type(msg).__name__)
    if isinstance(phase, Halted):
        if phase.reason is not None and isinstance(msg, (AckTokenMsg, Nack)):
            return s, [Send(Halt(phase.reason, s.session_id))]
        return _ignore(s, type(msg).__name__)

    if isinstance(msg, AckTokenMsg):
        return _on_token(s, msg)
    if isinstance(msg, Nack):
        return _on_nack(s, msg)
    return _ignore(s, type(msg).__name__)
