"""(2,2)-threshold XOR-homomorphic Goldwasser-Micali encryption.

A trusted dealer picks Blum primes p, q and splits each additively,
``p = p0 + p1 + p2`` and ``q = q0 + q1 + q2``, with the private parts
divisible by 4. Party i holds (p_i, q_i); (N, p0, q0) is public.

Ciphertexts are plain ints in [1, N). For a ciphertext C the three
decryption shares are::

    b0 = C ** ((N - p0 - q0 + 1) / 4)     public part
    b1 = C ** (-(p1 + q1) / 4)            user share
    b2 = C ** (-(p2 + q2) / 4)            verifier share

The exponents sum to (N - p - q + 1)/4 = phi(N)/4, so b0*b1*b2 is +1 for a
quadratic residue (bit 0) and -1 for a Jacobi-1 non-residue (bit 1).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd

from .numtheory import default_rng, gen_blum_prime, jacobi, mod_exp_signed

# 80-bit security -> 1024-bit modulus
SECURITY_PRIME_BITS = {80: 512, 112: 1024, 128: 1536}


class InvalidCiphertext(ValueError):
    """Ciphertext is out of range, shares a factor with N, or has Jacobi symbol != 1."""


class CombineError(ValueError):
    """Decryption shares do not multiply to +1 or -1: a corrupted share or a dishonest party."""


@dataclass(frozen=True)
class GmPublicKey:
    n: int
    p0: int
    q0: int
    security_bits: int = 0

    @property
    def public_exponent(self) -> int:
        return (self.n - self.p0 - self.q0 + 1) // 4

    @property
    def byte_length(self) -> int:
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class GmKeyShare:
    p_share: int
    q_share: int
    index: int

    def __post_init__(self):
        if self.index not in (1, 2):
            raise ValueError("share index must be 1 or 2")
        if self.p_share % 4 or self.q_share % 4:
            raise ValueError("key shares must be divisible by 4")

    @property
    def exponent(self) -> int:
        return -(self.p_share + self.q_share) // 4

    def __repr__(self):
        return f"GmKeyShare(index={self.index}, <redacted>)"


def _draw_share(bound_bits: int, rng) -> int:
    while True:
        v = rng.getrandbits(bound_bits)
        v -= v % 4
        if v > 0:
            return v


def dealer_keygen(prime_bits=None, rng=None, *, security_bits: int = 80,
                  primes=None, shares=None, allow_toy: bool = False):
    """Run the trusted dealer. Returns ``(pk, share1, share2)``.

    ``prime_bits`` defaults to the size matching ``security_bits``.
    ``primes=(p, q)`` and ``shares=((p1, q1), (p2, q2))`` pin the dealer's
    choices for fixtures such as the N = 77 worked example.
    """
    rng = rng or default_rng()
    if primes is None:
        if prime_bits is None:
            prime_bits = SECURITY_PRIME_BITS[security_bits]
        elif prime_bits != SECURITY_PRIME_BITS.get(security_bits):
            security_bits = 0
        p = gen_blum_prime(prime_bits, rng, allow_toy=allow_toy)
        q = gen_blum_prime(prime_bits, rng, allow_toy=allow_toy)
        while q == p:
            q = gen_blum_prime(prime_bits, rng, allow_toy=allow_toy)
    else:
        p, q = primes
        if p % 4 != 3 or q % 4 != 3 or p == q:
            raise ValueError("dealer primes must be distinct and = 3 mod 4")
        prime_bits = max(p.bit_length(), q.bit_length())
        security_bits = 0
    if shares is None:
        (p1, q1), (p2, q2) = [(_draw_share(2 * prime_bits, rng), _draw_share(2 * prime_bits, rng))
                              for _ in range(2)]
    else:
        (p1, q1), (p2, q2) = shares
    pk = GmPublicKey(n=p * q, p0=p - p1 - p2, q0=q - q1 - q2, security_bits=security_bits)
    s1 = GmKeyShare(p1, q1, 1)
    s2 = GmKeyShare(p2, q2, 2)
    del p, q
    return pk, s1, s2


def validate(pk: GmPublicKey, c: int) -> bool:
    return 1 <= c < pk.n and gcd(c, pk.n) == 1 and jacobi(c, pk.n) == 1


def _require_valid(pk_or_n, c: int) -> None:
    n = pk_or_n.n if isinstance(pk_or_n, GmPublicKey) else pk_or_n
    if not (1 <= c < n and gcd(c, n) == 1 and jacobi(c, n) == 1):
        raise InvalidCiphertext("ciphertext failed the Jacobi check")


def _random_unit(n: int, rng) -> int:
    while True:
        r = rng.randrange(1, n)
        if gcd(r, n) == 1:
            return r


def encrypt_bit(pk: GmPublicKey, b: int, rng=None, *, r: int | None = None) -> int:
    """C = (-1)**b * r**2 mod N with r a random unit (or the given ``r``)."""
    if b not in (0, 1):
        raise ValueError(f"plaintext must be a bit, got {b!r}")
    if r is None:
        r = _random_unit(pk.n, rng or default_rng())
    c = r * r % pk.n
    return (pk.n - c) % pk.n if b else c


def hom_xor(pk: GmPublicKey, c1: int, c2: int, *, check: bool = True) -> int:
    """Ciphertext of the XOR of the two plaintexts."""
    if check:
        _require_valid(pk, c1)
        _require_valid(pk, c2)
    return c1 * c2 % pk.n


def partial_decrypt(share: GmKeyShare, c: int, n: int, *, check: bool = True) -> int:
    if check:
        _require_valid(n, c)
    return mod_exp_signed(c, share.exponent, n)


def public_part(pk: GmPublicKey, c: int, *, check: bool = True) -> int:
    if check:
        _require_valid(pk, c)
    return mod_exp_signed(c, pk.public_exponent, pk.n)


def combine(b0: int, b1: int, b2: int, n: int) -> int:
    prod = b0 * b1 % n * b2 % n
    if prod == 1:
        return 0
    if prod == n - 1:
        return 1
    raise CombineError("decryption shares do not combine to +1 or -1")


def decrypt_full(pk: GmPublicKey, share1: GmKeyShare, share2: GmKeyShare, c: int) -> int:
    """Both shares in one place. Only tests and the dealer's audit tools do this."""
    _require_valid(pk, c)
    return combine(public_part(pk, c, check=False),
                   partial_decrypt(share1, c, pk.n, check=False),
                   partial_decrypt(share2, c, pk.n, check=False),
                   pk.n)
