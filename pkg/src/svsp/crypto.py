"""Modular arithmetic, textbook RSA and Diffie-Hellman agreement.

Everything here is deliberately textbook: no blinding, no OAEP, no
constant-time exponentiation.  Integers serialize big-endian.
"""
from __future__ import annotations

import hashlib
import random
import secrets
from dataclasses import dataclass
from math import gcd

__all__ = [
    "CryptoError",
    "NoInverseError",
    "KeyTooSmallError",
    "MalformedPaddingError",
    "InvalidPublicValueError",
    "RsaPublicKey",
    "RsaKeyPair",
    "DhParams",
    "DhKeyPair",
    "SharedSecret",
    "DEFAULT_DH_PARAMS",
    "mod_pow",
    "mod_inverse",
    "is_probable_prime",
    "rsa_keygen",
    "rsa_keypair_from_primes",
    "rsa_encrypt_block",
    "rsa_decrypt_block",
    "rsa_block_capacity",
    "rsa_encrypt_bytes",
    "rsa_decrypt_bytes",
    "dh_keygen",
    "dh_keypair_from_private",
    "dh_shared",
    "int_to_bytes",
    "byte_length",
]


class CryptoError(ValueError):
    pass


class NoInverseError(CryptoError):
    """Raised by :func:`mod_inverse` when gcd(a, m) != 1."""


class KeyTooSmallError(CryptoError):
    pass


class MalformedPaddingError(CryptoError):
    pass


class InvalidPublicValueError(CryptoError):
    pass


def byte_length(n: int) -> int:
    return max(1, (n.bit_length() + 7) // 8)


def int_to_bytes(value: int, length: int | None = None) -> bytes:
    if length is None:
        length = byte_length(value)
    return value.to_bytes(length, "big")


# -- arithmetic -------------------------------------------------------------

def mod_pow(base: int, exponent: int, modulus: int) -> int:
    """Compute ``base ** exponent % modulus`` by right-to-left square and multiply."""
    if modulus == 0:
        raise ValueError("modulus must be non-zero")
    if modulus < 0:
        raise ValueError("modulus must be positive")
    if exponent < 0:
        raise ValueError("exponent must be non-negative")
    if modulus == 1:
        return 0
    result = 1
    base %= modulus
    while exponent:
        if exponent & 1:
            result = (result * base) % modulus
        base = (base * base) % modulus
        exponent >>= 1
    return result


def _egcd(a: int, b: int) -> tuple[int, int, int]:
    old_r, r = a, b
    old_s, s = 1, 0
    old_t, t = 0, 1
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_s, s = s, old_s - q * s
        old_t, t = t, old_t - q * t
    return old_r, old_s, old_t


def mod_inverse(a: int, m: int) -> int:
    """Return x in [1, m) with a*x = 1 (mod m).

    Raises :class:`NoInverseError` when a and m share a factor.
    """
    if m < 2:
        raise ValueError("modulus must be >= 2")
    g, x, _ = _egcd(a % m, m)
    if g != 1:
        raise NoInverseError(f"{a} has no inverse modulo {m} (gcd {g})")
    return x % m


_SMALL_PRIMES = (
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
    73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151,
    157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233,
    239, 241, 251,
)
# Deterministic for every n < 3.3e24, which covers the 64-bit range.
_MR_BASES_64 = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
_MR_EXTRA_ROUNDS = 32


def _miller_rabin_round(n: int, d: int, s: int, a: int) -> bool:
    x = mod_pow(a, d, n)
    if x == 1 or x == n - 1:
        return True
    for _ in range(s - 1):
        x = (x * x) % n
        if x == n - 1:
            return True
    return False


def is_probable_prime(n: int) -> bool:
    """Miller-Rabin; exact below 2**64, 32 seeded random rounds above."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES_64:
        if not _miller_rabin_round(n, d, s, a):
            return False
    if n < 1 << 64:
        return True
    # Bases are seeded from n itself so the verdict is reproducible.
    rng = random.Random(n)
    for _ in range(_MR_EXTRA_ROUNDS):
        a = rng.randrange(2, n - 1)
        if not _miller_rabin_round(n, d, s, a):
            return False
    return True


# -- RSA ----------------------------------------------------------------------

@dataclass(frozen=True)
class RsaPublicKey:
    n: int
    e: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("modulus must be positive")
        if not 1 < self.e < self.n:
            raise ValueError("public exponent must satisfy 1 < e < n")


@dataclass(frozen=True)
class RsaKeyPair:
    p: int
    q: int
    n: int
    phi: int
    e: int
    d: int

    @property
    def public(self) -> RsaPublicKey:
        return RsaPublicKey(self.n, self.e)


def _choose_exponent(phi: int) -> int:
    if 65537 < phi and gcd(65537, phi) == 1:
        return 65537
    e = 3
    while gcd(e, phi) != 1:
        e += 2
    return e


def rsa_keypair_from_primes(p: int, q: int, e: int | None = None) -> RsaKeyPair:
    """Assemble a keypair from chosen primes, e.g. the classroom p=3, q=11."""
    if p == q:
        raise ValueError("p and q must be distinct")
    if not (is_probable_prime(p) and is_probable_prime(q)):
        raise ValueError("p and q must be prime")
    n = p * q
    phi = (p - 1) * (q - 1)
    if e is None:
        e = _choose_exponent(phi)
    if not 1 < e < phi:
        raise ValueError("e must satisfy 1 < e < phi")
    d = mod_inverse(e, phi)
    return RsaKeyPair(p=p, q=q, n=n, phi=phi, e=e, d=d)


def _random_prime(bits: int, rng: random.Random) -> int:
    top = 1 << (bits - 1)
    while True:
        candidate = rng.getrandbits(bits) | top | 1
        if is_probable_prime(candidate):
            return candidate


MIN_RSA_BITS = 8


def rsa_keygen(bit_length: int, seed: int | None = None) -> RsaKeyPair:
    """Generate a keypair whose primes each have ceil(bit_length/2) bits.

    Deterministic for a given ``seed``; ``seed=None`` draws from the OS.
    """
    if bit_length < MIN_RSA_BITS:
        raise ValueError(f"bit_length must be >= {MIN_RSA_BITS}")
    rng = random.Random(seed if seed is not None else secrets.randbits(64))
    half = (bit_length + 1) // 2
    p = _random_prime(half, rng)
    q = _random_prime(half, rng)
    while q == p:
        q = _random_prime(half, rng)
    return rsa_keypair_from_primes(p, q)


def rsa_encrypt_block(m: int, key: RsaPublicKey) -> int:
    if not 0 <= m < key.n:
        raise ValueError("plaintext block must satisfy 0 <= m < n")
    return mod_pow(m, key.e, key.n)


def rsa_decrypt_block(c: int, pair: RsaKeyPair) -> int:
    if not 0 <= c < pair.n:
        raise ValueError("ciphertext block must satisfy 0 <= c < n")
    return mod_pow(c, pair.d, pair.n)


def rsa_block_capacity(n: int) -> int:
    """Bytes per plaintext block, length prefix included."""
    return (n.bit_length() - 1) // 8


def rsa_encrypt_bytes(data: bytes, key: RsaPublicKey) -> list[int]:
    """Encrypt a byte string block-wise.

    Each block carries up to ``B - 2`` bytes behind a 2-byte big-endian
    length and is zero-filled to ``B`` bytes, so its integer value stays
    below ``n``.  An empty input still produces one block.
    """
    cap = rsa_block_capacity(key.n)
    if cap < 3:
        raise KeyTooSmallError(f"modulus of {key.n.bit_length()} bits is too small")
    step = cap - 2
    pieces = [data[i:i + step] for i in range(0, len(data), step)] or [b""]
    blocks = []
    for piece in pieces:
        padded = len(piece).to_bytes(2, "big") + piece
        padded += bytes(cap - len(padded))
        blocks.append(rsa_encrypt_block(int.from_bytes(padded, "big"), key))
    return blocks


def rsa_decrypt_bytes(blocks: list[int], pair: RsaKeyPair) -> bytes:
    cap = rsa_block_capacity(pair.n)
    if cap < 3:
        raise KeyTooSmallError(f"modulus of {pair.n.bit_length()} bits is too small")
    out = bytearray()
    for c in blocks:
        m = rsa_decrypt_block(c, pair)
        if m >= 1 << (8 * cap):
            raise MalformedPaddingError("decrypted block exceeds block capacity")
        padded = m.to_bytes(cap, "big")
        length = int.from_bytes(padded[:2], "big")
        if length > cap - 2:
            raise MalformedPaddingError(f"length prefix {length} exceeds {cap - 2}")
        out += padded[2:2 + length]
    return bytes(out)


# -- Diffie-Hellman -----------------------------------------------------------

@dataclass(frozen=True)
class DhParams:
    prime: int
    generator: int

    def __post_init__(self) -> None:
        if self.prime < 5 or self.prime % 2 == 0:
            raise ValueError("DH prime must be odd and >= 5")
        if not 2 <= self.generator <= self.prime - 2:
            raise ValueError("DH generator must lie in [2, prime-2]")

    @property
    def element_length(self) -> int:
        return byte_length(self.prime)


# 256-bit safe prime p = 2q + 1 with p = 7 (mod 8), so 2 is a quadratic
# residue and generates the subgroup of prime order q.
DEFAULT_DH_PARAMS = DhParams(
    prime=0xEE39D1F417A12B00F31F0B2831FE825F692E8F353D92735DEDB63C5CBB09B6B7,
    generator=2,
)


@dataclass(frozen=True)
class DhKeyPair:
    private: int
    public: int


@dataclass(frozen=True)
class SharedSecret:
    bytes: bytes

    def __post_init__(self) -> None:
        if len(self.bytes) != 32:
            raise ValueError("shared secret must be 32 bytes")


def dh_keypair_from_private(params: DhParams, private: int) -> DhKeyPair:
    if not 2 <= private <= params.prime - 2:
        raise ValueError("DH private value must lie in [2, prime-2]")
    return DhKeyPair(private, mod_pow(params.generator, private, params.prime))


def dh_keygen(params: DhParams = DEFAULT_DH_PARAMS, seed: int | None = None) -> DhKeyPair:
    if seed is None:
        private = 2 + secrets.randbelow(params.prime - 3)
    else:
        private = random.Random(seed).randint(2, params.prime - 2)
    return dh_keypair_from_private(params, private)


def dh_shared(own: DhKeyPair, peer_public: int, params: DhParams = DEFAULT_DH_PARAMS) -> SharedSecret:
    """Agree on the group element and hash it to a 32-byte secret.

    Peer values 0, 1 and prime-1 (and anything out of range) are refused:
    they pin the result to a trivial subgroup.
    """
    if not 2 <= peer_public <= params.prime - 2:
        raise InvalidPublicValueError(f"peer public value {peer_public} out of range")
    element = mod_pow(peer_public, own.private, params.prime)
    digest = hashlib.sha256(int_to_bytes(element, params.element_length)).digest()
    return SharedSecret(digest)


def dh_group_element(own: DhKeyPair, peer_public: int, params: DhParams) -> int:
    """The raw agreed element, before hashing.  Exposed for worked examples."""
    if not 2 <= peer_public <= params.prime - 2:
        raise InvalidPublicValueError(f"peer public value {peer_public} out of range")
    return mod_pow(peer_public, own.private, params.prime)
