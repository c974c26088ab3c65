"""Deterministic RSA hash-then-sign (SHA-256, PKCS#1 v1.5 style padding)."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from math import gcd

from .numtheory import default_rng, gen_prime, mod_inv, powmod

HASH_NAME = "sha256"
DEFAULT_EXPONENT = 65537
DEFAULT_BITS = 1024
# below this the padded digest no longer fits
MIN_BITS = 512

_SHA256_DIGEST_INFO = bytes.fromhex("3031300d060960864801650304020105000420")


@dataclass(frozen=True)
class SigPublicKey:
    n: int
    e: int
    owner: str

    @property
    def byte_length(self) -> int:
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class SigPrivateKey:
    n: int
    e: int
    d: int
    p: int
    q: int
    owner: str

    @property
    def public(self) -> SigPublicKey:
        return SigPublicKey(self.n, self.e, self.owner)

    def __repr__(self):
        return f"SigPrivateKey(owner={self.owner!r}, bits={self.n.bit_length()})"


@dataclass(frozen=True)
class Signature:
    value: int
    signer_id: str


def sig_keygen(owner: str, bits: int = DEFAULT_BITS, rng=None, *, allow_small: bool = False,
               e: int = DEFAULT_EXPONENT) -> SigPrivateKey:
    if bits < DEFAULT_BITS and not allow_small:
        raise ValueError(f"{bits}-bit signing keys need allow_small=True")
    if bits < MIN_BITS:
        raise ValueError(f"signing keys must be at least {MIN_BITS} bits")
    rng = rng or default_rng()
    half = bits // 2
    while True:
        p = gen_prime(half, rng)
        q = gen_prime(bits - half, rng)
        if p == q or (p * q).bit_length() != bits:
            continue
        phi = (p - 1) * (q - 1)
        if gcd(e, phi) == 1:
            break
    return SigPrivateKey(n=p * q, e=e, d=mod_inv(e, phi), p=p, q=q, owner=owner)


def _encode(message: bytes, k: int) -> int:
    digest = hashlib.sha256(message).digest()
    t = _SHA256_DIGEST_INFO + digest
    if k < len(t) + 11:
        raise ValueError("modulus too short for the padded digest")
    return int.from_bytes(b"\x00\x01" + b"\xff" * (k - len(t) - 3) + b"\x00" + t, "big")


def sign(sk: SigPrivateKey, message: bytes) -> Signature:
    if not message:
        raise ValueError("refusing to sign an empty message")
    k = (sk.n.bit_length() + 7) // 8
    m = _encode(message, k)
    # CRT
    sp = powmod(m % sk.p, sk.d % (sk.p - 1), sk.p)
    sq = powmod(m % sk.q, sk.d % (sk.q - 1), sk.q)
    h = mod_inv(sk.q, sk.p) * (sp - sq) % sk.p
    return Signature(sq + h * sk.q, sk.owner)


def verify(pk: SigPublicKey, message: bytes, sig: Signature) -> bool:
    if sig.signer_id != pk.owner or not 0 <= sig.value < pk.n or not message:
        return False
    return powmod(sig.value, pk.e, pk.n) == _encode(message, pk.byte_length)
