import random

import pytest

from thrive import threshold_gm as gm
from thrive.protocol import MemoryStore, UserClient, UserKeys
from thrive.service import Verifier
from thrive.signatures import sig_keygen
from thrive.storage import VerifierUserKeys

_criteria = []


def legendre(a, p):
    """Euler's criterion, for oracle use only."""
    a %= p
    if a == 0:
        return 0
    return 1 if pow(a, (p - 1) // 2, p) == 1 else -1


def qr_table(n):
    """Set of nonzero squares mod n, by enumeration."""
    return {x * x % n for x in range(1, n)}


@pytest.fixture
def rng():
    return random.Random(20240601)


@pytest.fixture(scope="session")
def toy_keys():
    """The N = 77 worked example: p=7, q=11, all private shares 4."""
    return gm.dealer_keygen(primes=(7, 11), shares=((4, 4), (4, 4)))


@pytest.fixture(scope="session")
def small_keys():
    return gm.dealer_keygen(128, random.Random(5))


@pytest.fixture(scope="session")
def sig_pair():
    r = random.Random(11)
    return sig_keygen("alice", 512, r, allow_small=True), sig_keygen("verifier", 512, r, allow_small=True)


def make_deployment(gm_keys, sig_pair, *, biohash_len=None, mu=None, clock=None, seed=3):
    """In-memory verifier and the matching client for user 'alice'."""
    pk, s1, s2 = gm_keys
    usk, vsk = sig_pair
    r = random.Random(seed)
    extra = {} if clock is None else {"clock": clock}
    verifier = Verifier({"alice": VerifierUserKeys(pk, s2, usk.public)}, MemoryStore(), vsk,
                        biohash_len=biohash_len, mu=mu, rng=r, **extra)
    client = UserClient(UserKeys(pk, s1, usk, vsk.public), r, **extra)
    return client, verifier


@pytest.fixture
def criterion():
    """Record a pass/fail line for the acceptance summary."""
    def record(name, passed, detail=""):
        _criteria.append((name, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
