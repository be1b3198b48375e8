"""Runnable roles: the content server, the legitimate client and two
download-manager style attackers, over either the simulator or UDP."""
from __future__ import annotations

import hashlib
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Callable, Mapping, Optional

from .crypto import DEFAULT_DH_PARAMS, DhParams, dh_keygen, rsa_keygen
from .protocol.client import (
    Aborted,
    ClientParams,
    ClientSession,
    Done,
    HonestTokens,
    ReplayTokens,
    TokenPolicy,
    WithholdTokens,
    client_step,
    new_client_session,
)
from .protocol.codec import (
    DecodeError,
    Hello,
    HelloReply,
    HelloStatus,
    decode_message,
    encode_message,
)
from .protocol.events import ArmTimer, CancelTimer, Deliver, Note, Received, Send, Start, TimerExpired
from .protocol.server import ServerParams, ServerSession, new_server_session, server_step
from .transport.sim import NetConditions, SimResult, SplitMix64, sim_run
from .transport.udp import TransportError, UdpEndpoint

log = logging.getLogger("svsp")

DEFAULT_RSA_BITS = 512


class ContentStore:
    """Files under ``root``, read lazily and cached with their SHA-256."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root).resolve()
        if not self.root.is_dir():
            raise FileNotFoundError(f"content root {root} is not a directory")
        self._cache: dict[str, tuple[bytes, bytes]] = {}
        self._lock = threading.Lock()

    def _resolve(self, name: str) -> Optional[Path]:
        if not name or "\x00" in name or Path(name).is_absolute():
            return None
        path = (self.root / name).resolve()
        if path != self.root and self.root not in path.parents:
            return None
        return path if path.is_file() else None

    def get(self, name: str) -> Optional[bytes]:
        with self._lock:
            hit = self._cache.get(name)
            if hit is not None:
                return hit[0]
            path = self._resolve(name)
            if path is None:
                return None
            data = path.read_bytes()
            self._cache[name] = (data, hashlib.sha256(data).digest())
            return data

    def sha256(self, name: str) -> Optional[bytes]:
        return self._cache[name][1] if self.get(name) is not None else None


@dataclass(frozen=True)
class ServerConfig:
    bind: tuple[str, int] = ("127.0.0.1", 9000)
    root: str = "."
    chunk_size: int = 1024
    window_size: int = 32
    token_timeout_ms: int = 2000
    max_pokes: int = 3
    dh_params: DhParams = DEFAULT_DH_PARAMS
    log_level: str = "info"

    def session_params(self) -> ServerParams:
        return ServerParams(self.chunk_size, self.window_size, self.token_timeout_ms,
                            self.max_pokes, self.dh_params)


@dataclass
class FetchReport:
    outcome: str  # done | aborted | halted
    reason: str = ""
    bytes_received: int = 0
    chunks_received: int = 0
    chunks_retransmitted: int = 0
    nacks_sent: int = 0
    tokens_sent: int = 0
    crc_errors: int = 0
    duration_s: float = 0.0
    content_length: Optional[int] = None
    # window_size * chunk_size from the metafile: the most one window can carry
    window_bytes: Optional[int] = None
    captured_tokens: dict[int, bytes] = field(default_factory=dict, repr=False)

    def lines(self) -> list[str]:
        return [
            f"outcome={self.outcome}",
            f"reason={self.reason}",
            f"bytes_received={self.bytes_received}",
            f"chunks_received={self.chunks_received}",
            f"chunks_retransmitted={self.chunks_retransmitted}",
            f"nacks_sent={self.nacks_sent}",
            f"tokens_sent={self.tokens_sent}",
            f"crc_errors={self.crc_errors}",
            f"duration_s={self.duration_s:.3f}",
            f"content_length={'' if self.content_length is None else self.content_length}",
            f"window_bytes={'' if self.window_bytes is None else self.window_bytes}",
        ]

    @property
    def contained(self) -> bool:
        """Halted by the server having leaked at most one window."""
        return (self.outcome == "halted" and self.window_bytes is not None
                and self.bytes_received <= self.window_bytes)


def report_from_client(c: ClientSession, duration_s: float) -> FetchReport:
    phase = c.phase
    if isinstance(phase, Done):
        outcome, reason = "done", ""
    elif isinstance(phase, Aborted):
        outcome, reason = ("halted" if phase.halted else "aborted"), phase.reason
    else:
        outcome, reason = "aborted", "incomplete"
    st = c.stats
    return FetchReport(
        outcome=outcome,
        reason=reason,
        bytes_received=st.bytes_received,
        chunks_received=st.chunks_received,
        chunks_retransmitted=st.chunks_retransmitted,
        nacks_sent=st.nacks_sent,
        tokens_sent=st.tokens_sent,
        crc_errors=st.crc_errors,
        duration_s=duration_s,
        content_length=c.meta.content_length if c.meta else None,
        window_bytes=c.meta.window_size * c.meta.chunk_size if c.meta else None,
        captured_tokens=dict(c.sent_tokens),
    )


def _policy(mode: Optional[str], captured: Optional[Mapping[int, bytes]] = None) -> TokenPolicy:
    if mode in (None, "honest"):
        return HonestTokens()
    if mode == "no-token":
        return WithholdTokens()
    if mode == "replay":
        return ReplayTokens(dict(captured or {}))
    raise ValueError(f"unknown attacker mode {mode!r}")


# -- simulator ----------------------------------------------------------------

@dataclass
class SimOutcome:
    result: SimResult
    report: FetchReport
    source_sha256: bytes

    @property
    def content_ok(self) -> bool:
        return hashlib.sha256(self.result.client.content).digest() == self.source_sha256


def _sim_sessions(content: bytes, name: str, seed: int, server_params: ServerParams,
                  client_params: ClientParams, rsa_bits: int):
    keys = SplitMix64(seed ^ 0x5356_5350)  # "SVSP"
    rsa = rsa_keygen(rsa_bits, keys.next_u64())
    client_dh = dh_keygen(server_params.dh_params, keys.next_u64())
    server_dh = dh_keygen(server_params.dh_params, keys.next_u64())
    nonce = keys.next_u64().to_bytes(8, "big") + keys.next_u64().to_bytes(8, "big")
    session_id = keys.next_u64() or 1
    library = {name: content}
    server = new_server_session(server_params, session_id, server_dh, nonce, library.get)
    client = new_client_session(name, rsa, client_dh, server_params.dh_params, client_params)
    return server, client


def simulate_fetch(content: bytes, conditions: NetConditions, *,
                   server_params: ServerParams = ServerParams(),
                   client_params: ClientParams = ClientParams(),
                   attacker: Optional[str] = None,
                   captured: Optional[Mapping[int, bytes]] = None,
                   name: str = "content.bin",
                   rsa_bits: int = DEFAULT_RSA_BITS,
                   key_seed: Optional[int] = None,
                   event_budget: int = 1_000_000) -> SimOutcome:
    """One full session on the simulator, keys derived from the seed.

    ``attacker="replay"`` without ``captured`` first runs a capture session
    under different keys and replays the tokens it sent there.
    """
    if attacker == "replay" and captured is None:
        first = simulate_fetch(content, conditions, server_params=server_params,
                               client_params=client_params, name=name, rsa_bits=rsa_bits,
                               key_seed=(conditions.seed if key_seed is None else key_seed) + 1,
                               event_budget=event_budget)
        captured = first.report.captured_tokens
    params = replace(client_params, policy=_policy(attacker, captured))
    server, client = _sim_sessions(content, name,
                                   conditions.seed if key_seed is None else key_seed,
                                   server_params, params, rsa_bits)
    result = sim_run(server, server_step, client, client_step, conditions,
                     event_budget=event_budget)
    report = report_from_client(result.client, result.end_time_ms / 1000)
    return SimOutcome(result, report, hashlib.sha256(content).digest())


# -- live UDP -----------------------------------------------------------------

class _Timers:
    def __init__(self) -> None:
        self.deadlines: dict[object, float] = {}

    def apply(self, key_prefix: tuple, action) -> None:
        key = key_prefix + (action.timer,)
        if isinstance(action, ArmTimer):
            self.deadlines[key] = time.monotonic() + action.delay_ms / 1000
        else:
            self.deadlines.pop(key, None)

    def next_deadline(self) -> Optional[float]:
        return min(self.deadlines.values(), default=None)

    def pop_expired(self) -> list:
        now = time.monotonic()
        due = sorted((d, k) for k, d in self.deadlines.items() if d <= now)
        for _, k in due:
            del self.deadlines[k]
        return [k for _, k in due]

    def drop(self, key_prefix: tuple) -> None:
        for k in [k for k in self.deadlines if k[:len(key_prefix)] == key_prefix]:
            del self.deadlines[k]


class Server:
    """Session manager over one UDP socket.

    Sessions are multiplexed on a single event loop, so each session's
    state is only ever touched from that loop.
    """

    LINGER_FACTOR = 2

    def __init__(self, config: ServerConfig, store: Optional[ContentStore] = None) -> None:
        self.config = config
        self.params = config.session_params()
        self.store = store or ContentStore(config.root)
        self.endpoint = UdpEndpoint(config.bind)
        self.sessions: dict[int, ServerSession] = {}
        self.peers: dict[int, tuple] = {}
        self.by_hello: dict[tuple, int] = {}
        self.linger: dict[int, float] = {}
        self.timers = _Timers()
        self.stop_event = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        return self.endpoint.address

    def _apply(self, sid: int, actions) -> None:
        for action in actions:
            if isinstance(action, Send):
                try:
                    self.endpoint.send(encode_message(action.message), self.peers[sid])
                except TransportError as exc:
                    log.warning("session=%016x send failed: %s", sid, exc)
            elif isinstance(action, (ArmTimer, CancelTimer)):
                self.timers.apply((sid,), action)
            elif isinstance(action, Note):
                log.info("session=%016x %s", sid, action.text)

    def _step(self, sid: int, event) -> None:
        before = type(self.sessions[sid].phase).__name__
        try:
            session, actions = server_step(self.sessions[sid], event)
        except Exception:  # a broken session must not take the server down
            log.exception("session=%016x step failed", sid)
            self._forget(sid)
            return
        self.sessions[sid] = session
        after = type(session.phase).__name__
        if after != before:
            log.info("session=%016x transition %s -> %s", sid, before, after)
        self._apply(sid, actions)
        if session.terminal and sid not in self.linger:
            budget = self.params.token_timeout_ms * (self.params.max_pokes + 1) / 1000
            self.linger[sid] = time.monotonic() + self.LINGER_FACTOR * budget
            self.timers.drop((sid,))

    def _forget(self, sid: int) -> None:
        self.sessions.pop(sid, None)
        self.peers.pop(sid, None)
        self.linger.pop(sid, None)
        self.timers.drop((sid,))
        for k in [k for k, v in self.by_hello.items() if v == sid]:
            del self.by_hello[k]

    def _on_hello(self, msg: Hello, peer) -> None:
        key = (peer, msg.content_name, msg.dh_public, msg.rsa_n, msg.rsa_e)
        sid = self.by_hello.get(key)
        if sid is not None:
            self._step(sid, Received(msg))
            return
        if self.store.get(msg.content_name) is None:
            log.info("session=%016x hello for unknown %r from %s", 0, msg.content_name, peer)
            self.endpoint.send(encode_message(HelloReply(0, HelloStatus.NOT_FOUND, 0)), peer)
            return
        sid = secrets.randbits(64) or 1
        while sid in self.sessions:
            sid = secrets.randbits(64) or 1
        self.sessions[sid] = new_server_session(
            self.params, sid, dh_keygen(self.params.dh_params), secrets.token_bytes(16),
            self.store.get)
        self.peers[sid] = peer
        self.by_hello[key] = sid
        self._step(sid, Received(msg))

    def handle_datagram(self, data: bytes, peer) -> None:
        try:
            msg = decode_message(data)
        except DecodeError as exc:
            log.debug("session=%016x dropped datagram from %s: %s", 0, peer, exc)
            return
        if isinstance(msg, Hello):
            self._on_hello(msg, peer)
            return
        sid = msg.session_id
        if sid not in self.sessions or self.peers.get(sid) != peer:
            log.debug("session=%016x stray %s from %s", sid, type(msg).__name__, peer)
            return
        self._step(sid, Received(msg))

    def poll(self, max_wait: float = 0.2) -> None:
        """Wait for one datagram or the next timer, then process what is due."""
        deadline = self.timers.next_deadline()
        wait = max_wait if deadline is None else min(max_wait, max(0.0, deadline - time.monotonic()))
        got = self.endpoint.receive(wait)
        if got is not None:
            self.handle_datagram(*got)
        for sid, name in self.timers.pop_expired():
            if sid in self.sessions:
                self._step(sid, TimerExpired(name))
        now = time.monotonic()
        for sid in [s for s, t in self.linger.items() if t <= now]:
            self._forget(sid)

    def serve_forever(self) -> None:
        log.info("session=%016x listening on %s:%d", 0, *self.address)
        try:
            while not self.stop_event.is_set():
                self.poll()
        finally:
            self.endpoint.close()
            log.info("session=%016x server stopped", 0)

    def shutdown(self) -> None:
        self.stop_event.set()


def serve(config: ServerConfig, stop_event: Optional[threading.Event] = None) -> None:
    """Run a server until ``stop_event`` is set (or forever)."""
    server = Server(config)
    if stop_event is not None:
        server.stop_event = stop_event
    server.serve_forever()


def _drive_client(session: ClientSession, server: tuple[str, int],
                  sink: Optional[BinaryIO],
                  stop: Optional[Callable[[ClientSession], bool]] = None,
                  bind: tuple[str, int] = ("127.0.0.1", 0)) -> FetchReport:
    started = time.monotonic()
    timers = _Timers()
    family_bind = ("::1", 0) if ":" in server[0] and bind == ("127.0.0.1", 0) else bind
    with UdpEndpoint(family_bind) as endpoint:

        def apply(actions) -> None:
            for action in actions:
                if isinstance(action, Send):
                    endpoint.send(encode_message(action.message), server)
                elif isinstance(action, (ArmTimer, CancelTimer)):
                    timers.apply((), action)
                elif isinstance(action, Deliver) and sink is not None:
                    sink.write(action.data)
                elif isinstance(action, Note):
                    log.debug("client %s", action.text)

        session, actions = client_step(session, Start())
        apply(actions)
        while not session.terminal and not (stop and stop(session)):
            deadline = timers.next_deadline()
            wait = 1.0 if deadline is None else max(0.0, deadline - time.monotonic())
            got = endpoint.receive(wait)
            if got is not None:
                try:
                    msg = decode_message(got[0])
                except DecodeError:
                    msg = None
                if msg is not None:
                    session, actions = client_step(session, Received(msg))
                    apply(actions)
            for (name,) in timers.pop_expired():
                if session.terminal:
                    break
                session, actions = client_step(session, TimerExpired(name))
                apply(actions)
    return report_from_client(session, time.monotonic() - started)


def _client_session(name: str, seed: Optional[int], policy: TokenPolicy,
                    client_params: ClientParams, dh_params: DhParams,
                    rsa_bits: int) -> ClientSession:
    if seed is None:
        seed = secrets.randbits(64)
    keys = SplitMix64(seed)
    rsa = rsa_keygen(rsa_bits, keys.next_u64())
    dh = dh_keygen(dh_params, keys.next_u64())
    return new_client_session(name, rsa, dh, dh_params, replace(client_params, policy=policy))


def fetch(server: tuple[str, int], content_name: str, sink: Optional[BinaryIO] = None,
          seed: Optional[int] = None, *, client_params: ClientParams = ClientParams(),
          dh_params: DhParams = DEFAULT_DH_PARAMS,
          rsa_bits: int = DEFAULT_RSA_BITS) -> FetchReport:
    """Download ``content_name`` as the legitimate client, writing to ``sink``."""
    session = _client_session(content_name, seed, HonestTokens(), client_params, dh_params, rsa_bits)
    return _drive_client(session, server, sink)


def attack_no_token(server: tuple[str, int], content_name: str, seed: Optional[int] = None, *,
                    client_params: ClientParams = ClientParams(),
                    dh_params: DhParams = DEFAULT_DH_PARAMS,
                    rsa_bits: int = DEFAULT_RSA_BITS) -> FetchReport:
    """Honest handshake, then take whatever arrives without ever acknowledging."""
    session = _client_session(content_name, seed, WithholdTokens(), client_params, dh_params, rsa_bits)
    return _drive_client(session, server, None)


def capture_tokens(server: tuple[str, int], content_name: str, seed: Optional[int] = None, *,
                   client_params: ClientParams = ClientParams(),
                   dh_params: DhParams = DEFAULT_DH_PARAMS,
                   rsa_bits: int = DEFAULT_RSA_BITS) -> dict[int, bytes]:
    """Run an own session just long enough to record the window-0 token."""
    session = _client_session(content_name, seed, HonestTokens(), client_params, dh_params, rsa_bits)
    report = _drive_client(session, server, None, stop=lambda c: 0 in c.sent_tokens)
    return report.captured_tokens


def attack_replay(server: tuple[str, int], content_name: str,
                  captured: Optional[Mapping[int, bytes]] = None, seed: Optional[int] = None, *,
                  client_params: ClientParams = ClientParams(),
                  dh_params: DhParams = DEFAULT_DH_PARAMS,
                  rsa_bits: int = DEFAULT_RSA_BITS) -> FetchReport:
    """Present tokens recorded in an earlier session of our own."""
    if captured is None:
        captured = capture_tokens(server, content_name,
                                  None if seed is None else seed + 1,
                                  client_params=client_params, dh_params=dh_params,
                                  rsa_bits=rsa_bits)
    session = _client_session(content_name, seed, ReplayTokens(dict(captured)),
                              client_params, dh_params, rsa_bits)
    return _drive_client(session, server, None)
