"""Bit-exact datagram codec.

Every datagram starts with a 12-byte header::

    +-------+-------+---------+----------+----------------+
    | 0x53  | 0x56  | version | msg_type | session_id     |
    | 1 B   | 1 B   | 1 B     | 1 B      | 8 B big-endian |
    +-------+-------+---------+----------+----------------+

followed by the body fields of the message in declaration order.  Integers
are big-endian; variable-length fields carry a 16-bit length prefix
(``content_name`` an 8-bit one).  Big integers use the minimal big-endian
encoding, so zero is the empty string.  PROTOCOL.md has worked examples.
"""
from __future__ import annotations

import enum
import hashlib
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Union

MAGIC = b"SV"
VERSION = 1
HEADER = struct.Struct("!2sBBQ")
HEADER_SIZE = HEADER.size
MAX_DATAGRAM = 1472
# seq (4) + payload length (2) + crc32 (4)
CHUNK_OVERHEAD = 10
MAX_CHUNK_PAYLOAD = MAX_DATAGRAM - HEADER_SIZE - CHUNK_OVERHEAD
MAX_NACK_SEQS = 256
MAX_NAME_BYTES = 255


class MsgType(enum.IntEnum):
    HELLO = 0x01
    HELLO_REPLY = 0x02
    METAFILE = 0x03
    CHUNK = 0x04
    ACK_TOKEN = 0x05
    NACK = 0x06
    HALT = 0x07
    FIN = 0x08


class HelloStatus(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1


class HaltReason(enum.IntEnum):
    TOKEN_TIMEOUT = 0
    TOKEN_INVALID = 1
    REPLAY = 2
    INTERNAL = 3


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    """Malformed datagram.  ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class Hello:
    content_name: str
    dh_public: int
    rsa_n: int
    rsa_e: int
    session_id: int = 0


@dataclass(frozen=True)
class HelloReply:
    dh_public: int
    status: HelloStatus = HelloStatus.OK
    session_id: int = 0


@dataclass(frozen=True)
class Metafile:
    """One slice of the RSA-encrypted metafile.

    ``blocks`` holds ciphertext blocks ``first_index .. first_index+len-1``
    out of ``total_blocks``.
    """

    total_blocks: int
    first_index: int
    blocks: tuple[bytes, ...]
    session_id: int = 0


@dataclass(frozen=True)
class Chunk:
    seq: int
    payload: bytes
    crc32: int
    session_id: int = 0

    @classmethod
    def make(cls, seq: int, payload: bytes, session_id: int = 0) -> "Chunk":
        return cls(seq, payload, zlib.crc32(payload), session_id)

    def crc_ok(self) -> bool:
        return zlib.crc32(self.payload) == self.crc32


@dataclass(frozen=True)
class AckTokenMsg:
    window_index: int
    value: bytes
    session_id: int = 0


@dataclass(frozen=True)
class Nack:
    missing_seqs: tuple[int, ...]
    session_id: int = 0


@dataclass(frozen=True)
class Halt:
    reason: HaltReason
    session_id: int = 0


@dataclass(frozen=True)
class Fin:
    content_sha256: bytes
    session_id: int = 0


Message = Union[Hello, HelloReply, Metafile, Chunk, AckTokenMsg, Nack, Halt, Fin]

_TYPE_OF = {
    Hello: MsgType.HELLO,
    HelloReply: MsgType.HELLO_REPLY,
    Metafile: MsgType.METAFILE,
    Chunk: MsgType.CHUNK,
    AckTokenMsg: MsgType.ACK_TOKEN,
    Nack: MsgType.NACK,
    Halt: MsgType.HALT,
    Fin: MsgType.FIN,
}


def _u(value: int, bits: int, name: str) -> int:
    if not isinstance(value, int) or not 0 <= value < 1 << bits:
        raise EncodeError(f"{name}={value!r} does not fit in {bits} unsigned bits")
    return value


def _bigint(value: int, name: str) -> bytes:
    if not isinstance(value, int) or value < 0:
        raise EncodeError(f"{name} must be a non-negative integer")
    raw = value.to_bytes((value.bit_length() + 7) // 8, "big")
    return _var(raw, name)


def _var(raw: bytes, name: str) -> bytes:
    if len(raw) > 0xFFFF:
        raise EncodeError(f"{name} longer than 65535 bytes")
    return struct.pack("!H", len(raw)) + raw


def _body(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        name = msg.content_name.encode("utf-8")
        if len(name) > MAX_NAME_BYTES:
            raise EncodeError(f"content_name is {len(name)} bytes, limit {MAX_NAME_BYTES}")
        return (bytes([len(name)]) + name + _bigint(msg.dh_public, "dh_public")
                + _bigint(msg.rsa_n, "rsa_n") + _bigint(msg.rsa_e, "rsa_e"))
    if isinstance(msg, HelloReply):
        return bytes([_u(int(msg.status), 8, "status")]) + _bigint(msg.dh_public, "dh_public")
    if isinstance(msg, Metafile):
        out = struct.pack("!HHH", _u(msg.total_blocks, 16, "total_blocks"),
                          _u(msg.first_index, 16, "first_index"),
                          _u(len(msg.blocks), 16, "block count"))
        return out + b"".join(_var(b, "block") for b in msg.blocks)
    if isinstance(msg, Chunk):
        if len(msg.payload) > MAX_CHUNK_PAYLOAD:
            raise EncodeError(f"chunk payload {len(msg.payload)} > {MAX_CHUNK_PAYLOAD}")
        return (struct.pack("!IH", _u(msg.seq, 32, "seq"), len(msg.payload)) + msg.payload
                + struct.pack("!I", _u(msg.crc32, 32, "crc32")))
    if isinstance(msg, AckTokenMsg):
        if len(msg.value) != 16:
            raise EncodeError("token value must be 16 bytes")
        return struct.pack("!I", _u(msg.window_index, 32, "window_index")) + msg.value
    if isinstance(msg, Nack):
        if len(msg.missing_seqs) > MAX_NACK_SEQS:
            raise EncodeError(f"nack lists {len(msg.missing_seqs)} seqs, limit {MAX_NACK_SEQS}")
        return struct.pack("!H", len(msg.missing_seqs)) + b"".join(
            struct.pack("!I", _u(s, 32, "seq")) for s in msg.missing_seqs)
    if isinstance(msg, Halt):
        return bytes([_u(int(msg.reason), 8, "reason")])
    if isinstance(msg, Fin):
        if len(msg.content_sha256) != 32:
            raise EncodeError("content_sha256 must be 32 bytes")
        return msg.content_sha256
    raise EncodeError(f"not a message: {msg!r}")


def encode_message(msg: Message) -> bytes:
    body = _body(msg)
    header = HEADER.pack(MAGIC, VERSION, _TYPE_OF[type(msg)], _u(msg.session_id, 64, "session_id"))
    datagram = header + body
    if len(datagram) > MAX_DATAGRAM:
        raise EncodeError(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM}")
    return datagram


class _Reader:
    def __init__(self, data: bytes, pos: int) -> None:
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated", f"need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("!I", self.take(4))[0]

    def var(self) -> bytes:
        return self.take(self.u16())

    def bigint(self) -> int:
        raw = self.var()
        if raw[:1] == b"\x00":
            raise DecodeError("non_canonical", "integer has a leading zero byte")
        return int.from_bytes(raw, "big")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing_bytes", f"{len(self.data) - self.pos} unread bytes")


def decode_message(datagram: bytes) -> Message:
    """Parse one datagram.  Raises :class:`DecodeError`, never anything else."""
    data = bytes(datagram)
    if len(data) > MAX_DATAGRAM:
        raise DecodeError("oversize", f"{len(data)} bytes")
    if len(data) < HEADER_SIZE:
        raise DecodeError("truncated", f"{len(data)}-byte header")
    magic, version, mtype, sid = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError("bad_magic", magic.hex())
    if version != VERSION:
        raise DecodeError("bad_version", str(version))
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise DecodeError("bad_type", str(mtype)) from None
    r = _Reader(data, HEADER_SIZE)
    msg: Message
    if kind is MsgType.HELLO:
        raw_name = r.take(r.u8())
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("bad_name", "content_name is not UTF-8") from None
        msg = Hello(name, r.bigint(), r.bigint(), r.bigint(), sid)
    elif kind is MsgType.HELLO_REPLY:
        status = r.u8()
        if status not in HelloStatus._value2member_map_:
            raise DecodeError("bad_status", str(status))
        msg = HelloReply(r.bigint(), HelloStatus(status), sid)
    elif kind is MsgType.METAFILE:
        total, first, count = r.u16(), r.u16(), r.u16()
        msg = Metafile(total, first, tuple(r.var() for _ in range(count)), sid)
    elif kind is MsgType.CHUNK:
        seq = r.u32()
        payload = r.take(r.u16())
        if len(payload) > MAX_CHUNK_PAYLOAD:
            raise DecodeError("oversize", "chunk payload")
        msg = Chunk(seq, payload, r.u32(), sid)
    elif kind is MsgType.ACK_TOKEN:
        msg = AckTokenMsg(r.u32(), r.take(16), sid)
    elif kind is MsgType.NACK:
        count = r.u16()
        if count > MAX_NACK_SEQS:
            raise DecodeError("oversize", f"nack lists {count} seqs")
        msg = Nack(tuple(r.u32() for _ in range(count)), sid)
    elif kind is MsgType.HALT:
        reason = r.u8()
        if reason not in HaltReason._value2member_map_:
            raise DecodeError("bad_reason", str(reason))
        msg = Halt(HaltReason(reason), sid)
    else:
        msg = Fin(r.take(32), sid)
    r.done()
    return msg


def with_session(msg: Message, session_id: int) -> Message:
    return replace(msg, session_id=session_id)


# -- metafile ---------------------------------------------------------------

_METAFILE = struct.Struct("!QHIH16s32s")
METAFILE_SIZE = _METAFILE.size


@dataclass(frozen=True)
class SessionMetafile:
    content_length: int
    chunk_size: int
    total_chunks: int
    window_size: int
    token_nonce: bytes
    content_sha256: bytes

    @property
    def total_windows(self) -> int:
        return -(-self.total_chunks // self.window_size)

    def window_of(self, seq: int) -> int:
        return seq // self.window_size

    def window_seqs(self, window: int) -> range:
        start = window * self.window_size
        return range(start, min(start + self.window_size, self.total_chunks))

    def chunk_length(self, seq: int) -> int:
        return min(self.chunk_size, self.content_length - seq * self.chunk_size)

    def pack(self) -> bytes:
        return _METAFILE.pack(self.content_length, self.chunk_size, self.total_chunks,
                              self.window_size, self.token_nonce, self.content_sha256)

    @classmethod
    def unpack(cls, raw: bytes) -> "SessionMetafile":
        if len(raw) != METAFILE_SIZE:
            raise DecodeError("bad_metafile", f"{len(raw)} bytes, expected {METAFILE_SIZE}")
        meta = cls(*_METAFILE.unpack(raw))
        if meta.chunk_size < 1 or meta.window_size < 1:
            raise DecodeError("bad_metafile", "zero chunk or window size")
        if meta.total_chunks != -(-meta.content_length // meta.chunk_size):
            raise DecodeError("bad_metafile", "total_chunks inconsistent with length")
        return meta


def build_metafile(content: bytes, chunk_size: int, window_size: int, nonce: bytes) -> SessionMetafile:
    if not 1 <= chunk_size <= MAX_CHUNK_PAYLOAD:
        raise ValueError(f"chunk_size must be in [1, {MAX_CHUNK_PAYLOAD}]")
    if not 1 <= window_size <= 0xFFFF:
        raise ValueError("window_size must be in [1, 65535]")
    if len(nonce) != 16:
        raise ValueError("nonce must be 16 bytes")
    return SessionMetafile(
        content_length=len(content),
        chunk_size=chunk_size,
        total_chunks=-(-len(content) // chunk_size),
        window_size=window_size,
        token_nonce=bytes(nonce),
        content_sha256=hashlib.sha256(content).digest(),
    )
