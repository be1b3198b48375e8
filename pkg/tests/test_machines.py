import hashlib
from dataclasses import replace

import pytest

from conftest import SMALL_DH, make_pair
from svsp.crypto import dh_keypair_from_private, dh_shared
from svsp.protocol.client import (
    Aborted,
    AwaitMetafile,
    ClientParams,
    Done,
    Receiving,
    SentHello,
    SentToken,
    WithholdTokens,
    client_step,
)
from svsp.protocol.codec import (
    AckTokenMsg,
    Chunk,
    Fin,
    Halt,
    HaltReason,
    Hello,
    HelloReply,
    HelloStatus,
    Metafile,
    Nack,
    decode_message,
    encode_message,
)
from svsp.protocol.events import (
    GAP_TIMER,
    RETRY_TIMER,
    TOKEN_TIMER,
    ArmTimer,
    CancelTimer,
    Deliver,
    Received,
    Send,
    Start,
    TimerExpired,
)
from svsp.protocol.server import (
    AwaitHello,
    AwaitToken,
    Finished,
    Halted,
    StreamingWindow,
    server_step,
)
from svsp.tokens import TokenVerifier, derive_token

CONTENT = bytes(range(256)) * 2 + b"tail!"  # 517 bytes


def sent(actions):
    return [a.message for a in actions if isinstance(a, Send)]


def chunk_seqs(actions):
    return [m.seq for m in sent(actions) if isinstance(m, Chunk)]


def pump(server, client, outbox, *, to_server=True, drop=lambda m: False):
    """Deliver messages back and forth until both sides go quiet."""
    queue = [(to_server, m) for m in outbox]
    log = []
    while queue:
        toward_server, msg = queue.pop(0)
        if drop(msg):
            continue
        msg = decode_message(encode_message(msg))
        log.append((toward_server, msg))
        if toward_server:
            server, actions = server_step(server, Received(msg))
            queue += [(False, m) for m in sent(actions)]
        else:
            client, actions = client_step(client, Received(msg))
            queue += [(True, m) for m in sent(actions)]
    return server, client, log


def handshake(server, client):
    client, actions = client_step(client, Start())
    hello = sent(actions)[0]
    server, actions = server_step(server, Received(hello))
    return server, client, hello, actions


def secret_for(server, client):
    return dh_shared(client.dh, server.dh.public, SMALL_DH)


class TestServerHandshake:
    def test_hello_starts_window_zero(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        msgs = sent(actions)
        assert isinstance(msgs[0], HelloReply) and msgs[0].status is HelloStatus.OK
        assert any(isinstance(m, Metafile) for m in msgs)
        assert chunk_seqs(actions) == [0, 1, 2]
        assert server.phase == StreamingWindow(0, frozenset({0, 1, 2}))
        assert ArmTimer(TOKEN_TIMER, 100) in actions

    def test_unknown_content(self):
        server, client = make_pair(CONTENT)
        hello = replace(client.hello, content_name="nope")
        server, actions = server_step(server, Received(hello))
        assert sent(actions) == [HelloReply(0, HelloStatus.NOT_FOUND, server.session_id)]
        assert server.phase == Halted(None)
        assert server.content is None and server.verifier is None

    def test_bad_dh_public_halts(self):
        server, client = make_pair(CONTENT)
        hello = replace(client.hello, dh_public=1)
        server, actions = server_step(server, Received(hello))
        assert sent(actions) == [Halt(HaltReason.INTERNAL, server.session_id)]

    def test_metafile_is_rsa_encrypted(self):
        server, client = make_pair(CONTENT)
        server, client, _, actions = handshake(server, client)
        plain = server.meta.pack()
        blob = b"".join(b for m in sent(actions) if isinstance(m, Metafile) for b in m.blocks)
        assert plain not in blob
        assert server.meta.token_nonce not in blob

    def test_hello_retransmit_repeats_handshake_only(self):
        server, client = make_pair(CONTENT)
        server, client, hello, first = handshake(server, client)
        server2, again = server_step(server, Received(hello))
        assert server2 == server
        assert [m for m in sent(again)] == [m for m in sent(first) if not isinstance(m, Chunk)]

    def test_empty_content_goes_straight_to_fin(self):
        server, client = make_pair(b"")
        server, client, _, actions = handshake(server, client)
        assert server.phase == Finished()
        assert Fin(hashlib.sha256(b"").digest(), server.session_id) in sent(actions)
        assert chunk_seqs(actions) == []


class TestServerTokens:
    def setup_method(self):
        server, client = make_pair(CONTENT)
        self.server, self.client, _, _ = handshake(server, client)
        self.secret = secret_for(self.server, self.client)
        self.nonce = self.server.token_nonce
        self.sid = self.server.session_id

    def token(self, w, secret=None):
        t = derive_token(secret or self.secret, self.nonce, w)
        return AckTokenMsg(t.window_index, t.value, self.sid)

    def test_valid_token_opens_next_window(self):
        s, actions = server_step(replace(self.server, phase=AwaitToken(0, 0)), Received(self.token(0)))
        assert s.phase == StreamingWindow(1, frozenset({3, 4, 5}))
        assert chunk_seqs(actions) == [3, 4, 5]

    def test_out_of_order_token_is_invalid(self):
        verifier = TokenVerifier(self.secret, self.nonce, expected=3)
        s = replace(self.server, phase=AwaitToken(3, 0), verifier=verifier)
        s, actions = server_step(s, Received(self.token(2)))
        assert s.phase == Halted(HaltReason.TOKEN_INVALID)
        assert sent(actions) == [Halt(HaltReason.TOKEN_INVALID, self.sid)]
        assert chunk_seqs(actions) == []

    def test_already_accepted_window_is_replay(self):
        s = self.server
        for w in range(3):
            s, _ = server_step(s, Received(self.token(w)))
        assert s.phase == StreamingWindow(3, frozenset({9, 10, 11}))
        s, actions = server_step(s, Received(self.token(2)))
        assert s.phase == Halted(HaltReason.REPLAY)
        assert sent(actions) == [Halt(HaltReason.REPLAY, self.sid)]

    def test_foreign_secret_is_invalid(self):
        other = dh_shared(dh_keypair_from_private(SMALL_DH, 999), self.server.dh.public, SMALL_DH)
        s, actions = server_step(self.server, Received(self.token(0, other)))
        assert s.phase == Halted(HaltReason.TOKEN_INVALID)

    def test_last_token_sends_fin(self):
        s = self.server
        windows = s.meta.total_windows
        for w in range(windows - 1):
            s, _ = server_step(s, Received(self.token(w)))
        s, actions = server_step(s, Received(self.token(windows - 1)))
        assert s.phase == Finished()
        assert sent(actions) == [Fin(hashlib.sha256(CONTENT).digest(), self.sid)]
        assert CancelTimer(TOKEN_TIMER) in actions

    def test_nack_retransmits_only_current_window(self):
        s, actions = server_step(self.server, Received(Nack((1, 2, 3, 50, 2), self.sid)))
        assert chunk_seqs(actions) == [1, 2]
        assert s.stats.chunks_retransmitted == 2
        assert s.phase == self.server.phase

    def test_pokes_then_timeout(self):
        s = self.server
        s, actions = server_step(s, TimerExpired(TOKEN_TIMER))
        assert s.phase == AwaitToken(0, 1) and chunk_seqs(actions) == [2]
        s, actions = server_step(s, TimerExpired(TOKEN_TIMER))
        assert s.phase == AwaitToken(0, 2) and chunk_seqs(actions) == [2]
        s, actions = server_step(s, TimerExpired(TOKEN_TIMER))
        assert s.phase == Halted(HaltReason.TOKEN_TIMEOUT)
        assert sent(actions) == [Halt(HaltReason.TOKEN_TIMEOUT, self.sid)]

    def test_wrong_session_ignored(self):
        bad = replace(self.token(0), session_id=self.sid + 1)
        s, actions = server_step(self.server, Received(bad))
        assert s == self.server and sent(actions) == []

    def test_halted_repeats_halt_on_client_traffic(self):
        s, _ = server_step(self.server, Received(self.token(5)))
        s2, actions = server_step(s, Received(Nack((), self.sid)))
        assert sent(actions) == [Halt(HaltReason.TOKEN_INVALID, self.sid)]
        s3, actions = server_step(s2, Received(self.token(0)))
        assert s3.phase == Halted(HaltReason.TOKEN_INVALID)
        assert chunk_seqs(actions) == []

    def test_step_does_not_mutate_input(self):
        before = self.server.verifier.copy()
        server_step(self.server, Received(self.token(0)))
        assert self.server.verifier.accepted == before.accepted
        assert self.server.verifier.expected == before.expected

    def test_deterministic(self):
        events = [Received(self.token(0)), TimerExpired(TOKEN_TIMER), Received(Nack((4,), self.sid)),
                  Received(self.token(1)), Received(self.token(1))]

        def run():
            s, out = self.server, []
            for ev in events:
                s, actions = server_step(s, ev)
                out.append(actions)
            return s, out
        assert run() == run()


class TestClient:
    def test_full_exchange(self):
        server, client = make_pair(CONTENT)
        client, actions = client_step(client, Start())
        server, client, log = pump(server, client, sent(actions))
        assert client.phase == Done() and server.phase == Finished()
        assert client.content == CONTENT
        assert client.stats.tokens_sent == server.meta.total_windows
        tokens = [m.window_index for toward, m in log if toward and isinstance(m, AckTokenMsg)]
        assert tokens == list(range(server.meta.total_windows))

    def test_token_only_after_window_complete(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        msgs = sent(actions)
        for m in msgs[:-1]:
            client, out = client_step(client, Received(m))
            assert not any(isinstance(x, AckTokenMsg) for x in sent(out))
        client, out = client_step(client, Received(msgs[-1]))
        assert [x.window_index for x in sent(out) if isinstance(x, AckTokenMsg)] == [0]
        assert Deliver(CONTENT[:12]) in out
        assert client.phase == SentToken(0)

    def test_lost_chunk_is_nacked_and_recovered(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        for m in sent(actions):
            if isinstance(m, Chunk) and m.seq == 2:
                continue
            client, _ = client_step(client, Received(m))
        assert client.phase == Receiving(0, frozenset({0, 1}))
        client, out = client_step(client, TimerExpired(GAP_TIMER))
        nack = sent(out)[0]
        assert nack == Nack((2,), server.session_id)
        server, out = server_step(server, Received(nack))
        assert chunk_seqs(out) == [2]
        client, out = client_step(client, Received(sent(out)[0]))
        assert [x.window_index for x in sent(out) if isinstance(x, AckTokenMsg)] == [0]
        assert client.stats.chunks_retransmitted == 1

    def test_crc_failure_is_dropped_and_counted(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        msgs = sent(actions)
        for m in msgs:
            if isinstance(m, Chunk) and m.seq == 1:
                m = replace(m, crc32=m.crc32 ^ 1)
            client, _ = client_step(client, Received(m))
        assert client.stats.crc_errors == 1
        assert 1 not in client.pending

    def test_fin_checksum_mismatch_aborts(self):
        server, client = make_pair(CONTENT)
        client, actions = client_step(client, Start())
        fin_seen = []

        def drop(m):
            if isinstance(m, Fin):
                fin_seen.append(m)
                return True
            return False
        server, client, _ = pump(server, client, sent(actions), drop=drop)
        assert isinstance(client.phase, SentToken)
        bad = Fin(bytes(32), server.session_id)
        client, _ = client_step(client, Received(bad))
        assert client.phase == Aborted("internal: checksum mismatch")

    def test_halt_aborts(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        client, _ = client_step(client, Received(sent(actions)[0]))
        client, _ = client_step(client, Received(Halt(HaltReason.TOKEN_TIMEOUT, server.session_id)))
        assert client.phase == Aborted("token_timeout", halted=True)

    def test_unreadable_metafile_aborts(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        for m in sent(actions):
            if isinstance(m, Metafile):
                m = replace(m, blocks=tuple(bytes(len(b)) for b in m.blocks))
            client, _ = client_step(client, Received(m))
            if isinstance(client.phase, Aborted):
                break
        assert isinstance(client.phase, Aborted)
        assert client.phase.reason.startswith("internal")

    def test_not_found(self):
        server, client = make_pair(CONTENT)
        client = replace(client, content_name="missing")
        client, actions = client_step(client, Start())
        server, client, _ = pump(server, client, sent(actions))
        assert client.phase == Aborted("not_found")

    def test_metafile_before_reply(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        msgs = sent(actions)
        reply = msgs[0]
        for m in msgs[1:] + [reply]:
            client, _ = client_step(client, Received(m))
        assert client.phase == SentToken(0)

    def test_hello_retry_and_idle_abort(self):
        _, client = make_pair(CONTENT, client_params=ClientParams(hello_retry_ms=100, idle_timeout_ms=350))
        client, _ = client_step(client, Start())
        resent = 0
        while not client.terminal:
            client, out = client_step(client, TimerExpired("hello"))
            resent += sum(isinstance(m, Hello) for m in sent(out))
        assert resent == 3  # at 100, 200 and 300 ms; 400 ms crosses the idle limit
        assert client.phase == Aborted("timeout")

    def test_withholding_client_never_sends_tokens(self):
        server, client = make_pair(CONTENT, client_params=ClientParams(policy=WithholdTokens()))
        client, actions = client_step(client, Start())
        server, client, log = pump(server, client, sent(actions))
        assert not any(isinstance(m, AckTokenMsg) for _, m in log)
        assert client.stats.bytes_received == 12
        assert isinstance(server.phase, StreamingWindow) and server.phase.w == 0

    def test_retry_timer_alternates_probe_and_token(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        for m in sent(actions):
            client, _ = client_step(client, Received(m))
        client, out = client_step(client, TimerExpired(RETRY_TIMER))
        assert sent(out) == [Nack((3, 4, 5), server.session_id)]
        client, out = client_step(client, TimerExpired(RETRY_TIMER))
        assert [m.window_index for m in sent(out) if isinstance(m, AckTokenMsg)] == [0]
        assert client.stats.tokens_sent == 2
        assert client.phase == SentToken(0, retries=2)

    def test_probe_recovers_lost_window_without_replay(self):
        server, client = make_pair(CONTENT)
        server, client, hello, actions = handshake(server, client)
        for m in sent(actions):
            client, out = client_step(client, Received(m))
        token = [m for m in sent(out) if isinstance(m, AckTokenMsg)][0]
        server, lost = server_step(server, Received(token))
        assert chunk_seqs(lost) == [3, 4, 5]
        client, out = client_step(client, TimerExpired(RETRY_TIMER))
        server, out = server_step(server, Received(sent(out)[0]))
        assert chunk_seqs(out) == [3, 4, 5]
        assert server.phase == StreamingWindow(1, frozenset({3, 4, 5}))

    def test_empty_content_session(self):
        server, client = make_pair(b"")
        client, actions = client_step(client, Start())
        server, client, _ = pump(server, client, sent(actions))
        assert client.phase == Done()
        assert client.stats.tokens_sent == 0 and client.stats.chunks_received == 0
