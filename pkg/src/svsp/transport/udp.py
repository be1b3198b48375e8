"""Real UDP socket binding."""
from __future__ import annotations

import socket
from typing import Optional

from ..protocol.codec import MAX_DATAGRAM

Address = tuple


class TransportError(OSError):
    pass


def parse_address(text: str) -> tuple[str, int]:
    """``host:port`` or ``[v6]:port`` to a (host, port) pair."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    host = host.strip("[]") or "0.0.0.0"
    return host, int(port)


class UdpEndpoint:
    """A bound datagram socket.

    ``receive`` returns ``None`` on timeout so the caller can turn it into
    a timer event.  Sends above the 1472-byte cap are refused before they
    reach the socket.
    """

    def __init__(self, bind: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        family = socket.AF_INET6 if ":" in bind[0] else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_DGRAM)
        try:
            self.sock.bind(bind)
        except OSError as exc:
            self.sock.close()
            raise TransportError(f"cannot bind {bind[0]}:{bind[1]}: {exc}") from exc

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def send(self, datagram: bytes, peer: Address) -> None:
        if len(datagram) > MAX_DATAGRAM:
            raise TransportError(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM}")
        try:
            self.sock.sendto(datagram, peer)
        except OSError as exc:
            raise TransportError(f"send to {peer} failed: {exc}") from exc

    def receive(self, timeout: Optional[float]) -> Optional[tuple[bytes, Address]]:
        """Wait up to ``timeout`` seconds; ``None`` means nothing arrived."""
        self.sock.settimeout(timeout)
        try:
            data, peer = self.sock.recvfrom(65535)
        except socket.timeout:
            return None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        return data, peer

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "UdpEndpoint":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
