"""Modular arithmetic used by the threshold GM scheme and the RSA signer."""
from __future__ import annotations

import secrets

try:
    import gmpy2
except ImportError:  # pragma: no cover - exercised only without gmpy2
    gmpy2 = None

MR_ROUNDS = 40
TOY_FLOOR_BITS = 16

_SMALL_PRIMES = [p for p in range(3, 2000) if all(p % d for d in range(2, int(p ** 0.5) + 1))]


class NotInvertibleError(ValueError):
    """Raised when an inverse is requested for a value sharing a factor with the modulus."""


def default_rng():
    return secrets.SystemRandom()


def powmod(base: int, exp: int, m: int) -> int:
    """base**exp mod m for exp >= 0, through GMP when it is available."""
    if gmpy2 is not None and m.bit_length() > 64:
        return int(gmpy2.powmod(base, exp, m))
    return pow(base, exp, m)


def mod_inv(a: int, m: int) -> int:
    """Return x in [0, m) with a*x = 1 (mod m)."""
    if m < 1:
        raise ValueError("modulus must be positive")
    try:
        return pow(a, -1, m)
    except ValueError:
        raise NotInvertibleError(f"{a} is not invertible modulo {m}") from None


def mod_exp_signed(base: int, exp: int, m: int) -> int:
    """base**exp mod m where a negative exponent means the inverse of base**|exp|.

    The decryption share exponents -(p_i + q_i)/4 are negative because the
    dealer's shares are larger than p and q.
    """
    if m < 2:
        raise ValueError("modulus must be at least 2")
    if exp < 0:
        base = mod_inv(base, m)
        exp = -exp
    return powmod(base % m, exp, m)


def jacobi(a: int, n: int) -> int:
    """Jacobi symbol (a/n) for odd positive n."""
    if n <= 0 or n % 2 == 0:
        raise ValueError(f"jacobi needs an odd positive modulus, got {n}")
    a %= n
    result = 1
    while a:
        while a % 2 == 0:
            a //= 2
            if n % 8 in (3, 5):
                result = -result
        a, n = n, a
        if a % 4 == 3 and n % 4 == 3:
            result = -result
        a %= n
    return result if n == 1 else 0


def is_probable_prime(n: int, rounds: int = MR_ROUNDS, rng=None) -> bool:
    """Miller-Rabin test; a composite survives with probability at most 4**-rounds."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if n < 2:
        return False
    for p in (2, *_SMALL_PRIMES):
        if n == p:
            return True
        if n % p == 0:
            return False
    rng = rng or default_rng()
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = powmod(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _check_bits(bits: int, allow_toy: bool) -> None:
    if bits < 3:
        raise ValueError("prime length must be at least 3 bits")
    if bits < TOY_FLOOR_BITS and not allow_toy:
        raise ValueError(f"{bits}-bit primes are below the {TOY_FLOOR_BITS}-bit floor; pass allow_toy=True")


def gen_prime(bits: int, rng=None, *, allow_toy: bool = False) -> int:
    """Random prime of exactly ``bits`` bits."""
    _check_bits(bits, allow_toy)
    rng = rng or default_rng()
    while True:
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if is_probable_prime(cand, MR_ROUNDS, rng):
            return cand


def gen_blum_prime(bits: int, rng=None, *, allow_toy: bool = False) -> int:
    """Random prime p = 3 (mod 4) of exactly ``bits`` bits."""
    _check_bits(bits, allow_toy)
    rng = rng or default_rng()
    while True:
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | 3
        if is_probable_prime(cand, MR_ROUNDS, rng):
            return cand
