import pytest

from svsp.crypto import DhParams, dh_keypair_from_private, rsa_keygen
from svsp.protocol.client import new_client_session
from svsp.protocol.server import ServerParams, new_server_session

ACCEPTANCE_LINES: list[str] = []

# 2**61 - 1 is prime; generator 3 keeps test handshakes cheap.
SMALL_DH = DhParams(prime=2**61 - 1, generator=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def client_rsa():
    return rsa_keygen(128, seed=2024)


def make_pair(content: bytes, *, chunk_size=4, window_size=3, max_pokes=2,
              token_timeout_ms=100, name="clip", rsa=None, session_id=77,
              nonce=bytes(range(16)), client_params=None):
    params = ServerParams(chunk_size=chunk_size, window_size=window_size,
                          token_timeout_ms=token_timeout_ms, max_pokes=max_pokes,
                          dh_params=SMALL_DH)
    server = new_server_session(params, session_id, dh_keypair_from_private(SMALL_DH, 1234567),
                                nonce, {name: content}.get)
    rsa = rsa or rsa_keygen(128, seed=2024)
    kwargs = {} if client_params is None else {"params": client_params}
    client = new_client_session(name, rsa, dh_keypair_from_private(SMALL_DH, 7654321), SMALL_DH,
                                **kwargs)
    return server, client
