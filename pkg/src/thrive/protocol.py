"""Enrollment (one message) and authentication (four rounds).

Authentication, with R = r xor B_auth and C_j the stored ciphertexts:

    user -> verifier   R, nonce_U
    verifier -> user   stored signed record, nonce_V
    user -> verifier   Sign(E_j = Enc(r_j), T1_j = share1(E_j * C_j), nonce_U, nonce_V)
    verifier -> user   Sign(verdict, nonce_U, nonce_V)

The verifier finishes the decryption of E_j * C_j = Enc(r_j xor B_enroll_j)
with its own share and the public part, and counts the positions where the
result differs from R_j. That count equals hamming(B_enroll, B_auth), and
neither template is ever in the clear on the wire.
"""
from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import threshold_gm as gm
from .numtheory import default_rng
from .signatures import SigPrivateKey, SigPublicKey, sign, verify
from .wire import (ACCEPT, REJECT, AuthChallenge, AuthRequest, AuthResponse, Decision,
                   EnrollmentRecord, ErrorFrame, Nonce, decision_signing_bytes, decode, encode,
                   record_signing_bytes, response_signing_bytes)

DEFAULT_SKEW = 120


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    REQUEST_REJECTED = 2   # unknown user, stale or replayed nonce, wrong length: one code on purpose
    BAD_SIGNATURE = 3
    INVALID_CIPHERTEXT = 4
    DUPLICATE = 5
    STORE_FAILURE = 6
    BUSY = 7
    UNEXPECTED_MESSAGE = 8


class ProtocolError(Exception):
    def __init__(self, code: ErrorCode, message: str = ""):
        code = ErrorCode(code)
        name = code.name.lower()
        super().__init__(f"{name}: {message}" if message and message != name else name)
        self.code = code


class DecisionError(ProtocolError):
    """The verifier's decision failed its signature or nonce check on the user side."""


@dataclass
class OpCounter:
    """Per-party tallies in the categories of the complexity accounting.

    ``share_exps`` counts the three decryption-share exponentiations (user
    share, verifier share, public part) that make up one "XOR-homomorphic
    decryption" each. ``mod_mults`` counts ciphertext products Enc(r_j)*C_j
    plus one multiplication per signature verification. Decision signing and
    checking are tracked separately because they are an add-on to the
    four-round flow.
    """
    encryptions: int = 0
    share_exps: int = 0
    sig_generations: int = 0
    sig_verifications: int = 0
    jacobi_checks: int = 0
    mod_mults: int = 0
    decision_signs: int = 0
    decision_verifies: int = 0

    def __add__(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def nonce_gen(actor_id: str, rng=None, clock=time.time) -> Nonce:
    rng = rng or default_rng()
    return Nonce(actor_id, rng.getrandbits(128).to_bytes(16, "big"), int(clock()))


def _bits(b) -> tuple:
    arr = np.asarray(b, dtype=np.uint8)
    if arr.ndim != 1 or np.any(arr > 1):
        raise ValueError("biohash must be a 1-D vector of bits")
    return tuple(int(v) for v in arr)


# -- enrollment --------------------------------------------------------------

def enroll_client(pk: gm.GmPublicKey, sig_sk: SigPrivateKey, biohash, rng=None, *,
                  overwrite: bool = False, counter: OpCounter | None = None) -> EnrollmentRecord:
    """Encrypt the template bit by bit and sign the ciphertext vector."""
    rng = rng or default_rng()
    bits = _bits(biohash)
    cts = tuple(gm.encrypt_bit(pk, b, rng) for b in bits)
    sig = sign(sig_sk, record_signing_bytes(sig_sk.owner, cts, overwrite))
    if counter is not None:
        counter.encryptions += len(cts)
        counter.sig_generations += 1
    return EnrollmentRecord(sig_sk.owner, cts, sig, overwrite)


def check_record(record: EnrollmentRecord, sig_pk: SigPublicKey, pk: gm.GmPublicKey,
                 biohash_len: int | None = None) -> None:
    if record.user_id != sig_pk.owner or not verify(sig_pk, record.signing_bytes(), record.signature):
        raise ProtocolError(ErrorCode.BAD_SIGNATURE, "record signature does not verify")
    if biohash_len is not None and record.biohash_len != biohash_len:
        raise ProtocolError(ErrorCode.MALFORMED, f"expected {biohash_len} ciphertexts")
    if not all(gm.validate(pk, c) for c in record.ciphertexts):
        raise ProtocolError(ErrorCode.INVALID_CIPHERTEXT, "ciphertext failed the Jacobi check")


def enroll_server(record: EnrollmentRecord, sig_pk: SigPublicKey, pk: gm.GmPublicKey, store, *,
                  biohash_len: int | None = None) -> EnrollmentRecord:
    """Verify and persist an enrollment. ``store`` maps user id -> record."""
    check_record(record, sig_pk, pk, biohash_len)
    existing = store.get(record.user_id)
    if existing is not None:
        if not record.overwrite:
            raise ProtocolError(ErrorCode.DUPLICATE, "user already enrolled")
        if existing.ciphertexts == record.ciphertexts:
            # fresh encryption never repeats, so this is a replayed frame
            raise ProtocolError(ErrorCode.DUPLICATE, "replayed enrollment")
    store.put(record)
    return record


class MemoryStore:
    """Dictionary-backed enrollment database for tests and in-process runs."""

    def __init__(self):
        self._records = {}
        self._lock = threading.Lock()

    def get(self, user_id):
        with self._lock:
            return self._records.get(user_id)

    def put(self, record: EnrollmentRecord) -> None:
        with self._lock:
            self._records[record.user_id] = record

    def __contains__(self, user_id):
        return user_id in self._records

    def __len__(self):
        return len(self._records)


# -- authentication ----------------------------------------------------------

class SessionState(enum.Enum):
    AWAIT_CHALLENGE = "await-challenge"
    AWAIT_RESPONSE = "await-response"
    DECIDED = "decided"


@dataclass
class AuthSession:
    """Verifier-side state between rounds 2 and 4."""
    user_id: str
    masked: tuple
    nonce_user: Nonce
    nonce_verifier: Nonce
    record: EnrollmentRecord
    state: SessionState = SessionState.AWAIT_RESPONSE
    distance: int | None = None
    decision: Decision | None = None


class ReplayCache:
    """Session ids seen within the last ``2 * skew`` seconds."""

    def __init__(self, skew: int = DEFAULT_SKEW):
        self.skew = skew
        self._seen = {}
        self._lock = threading.Lock()

    def admit(self, nonce: Nonce, now: float) -> bool:
        key = (nonce.actor_id, nonce.session_id)
        with self._lock:
            horizon = now - 2 * self.skew
            if len(self._seen) > 1024:
                self._seen = {k: t for k, t in self._seen.items() if t >= horizon}
            if key in self._seen and self._seen[key] >= horizon:
                return False
            self._seen[key] = now
            return True


def auth_round1_user(biohash_auth, user_id: str, rng=None, clock=time.time):
    """Mask the fresh template. Returns (request, r); r stays with the user."""
    rng = rng or default_rng()
    b = np.asarray(_bits(biohash_auth), dtype=np.uint8)
    word = rng.getrandbits(b.size) if b.size else 0
    r = np.array([(word >> i) & 1 for i in range(b.size)], dtype=np.uint8)
    masked = r ^ b
    return AuthRequest(user_id, _bits(masked), nonce_gen(user_id, rng, clock)), r.copy()


def auth_round2_verifier(req: AuthRequest, store, rng=None, *, replay_cache: ReplayCache,
                         biohash_len: int | None = None, clock=time.time, skew: int = DEFAULT_SKEW,
                         actor_id: str = "verifier"):
    """Look up the record and open a session. Returns (session, challenge).

    Every refusal here raises the same REQUEST_REJECTED code so the reply
    does not tell an outsider whether a user id exists.
    """
    now = clock()
    n = req.nonce_user
    if n.actor_id != req.user_id or abs(now - n.timestamp) > skew:
        raise ProtocolError(ErrorCode.REQUEST_REJECTED, "stale or foreign nonce")
    record = store.get(req.user_id)
    if record is None:
        raise ProtocolError(ErrorCode.REQUEST_REJECTED, "unknown user")
    if len(req.masked) != record.biohash_len or (biohash_len is not None and len(req.masked) != biohash_len):
        raise ProtocolError(ErrorCode.REQUEST_REJECTED, "wrong template length")
    if not replay_cache.admit(n, now):
        raise ProtocolError(ErrorCode.REQUEST_REJECTED, "replayed nonce")
    nv = nonce_gen(actor_id, rng, clock)
    session = AuthSession(req.user_id, req.masked, n, nv, record)
    return session, AuthChallenge(record, nv)


def auth_round3_user(challenge: AuthChallenge, r, sig_sk: SigPrivateKey, share1: gm.GmKeyShare,
                     pk: gm.GmPublicKey, nonce_user: Nonce, rng=None, *,
                     counter: OpCounter | None = None) -> AuthResponse:
    """Check our own enrollment signature, re-randomize, and partially decrypt."""
    rng = rng or default_rng()
    counter = counter if counter is not None else OpCounter()
    record = challenge.record
    counter.sig_verifications += 1
    counter.mod_mults += 1
    if record.user_id != sig_sk.owner or not verify(sig_sk.public, record.signing_bytes(), record.signature):
        raise ProtocolError(ErrorCode.BAD_SIGNATURE, "challenge does not carry our enrollment record")
    r = _bits(r)
    if len(r) != record.biohash_len:
        raise ProtocolError(ErrorCode.MALFORMED, "record length differs from our template")
    enc_r = tuple(gm.encrypt_bit(pk, b, rng) for b in r)
    shares = tuple(gm.partial_decrypt(share1, gm.hom_xor(pk, e, c, check=False), pk.n, check=False)
                   for e, c in zip(enc_r, record.ciphertexts))
    n = len(r)
    counter.encryptions += n
    counter.mod_mults += n
    counter.share_exps += n
    sig = sign(sig_sk, response_signing_bytes(sig_sk.owner, enc_r, shares, nonce_user, challenge.nonce_verifier))
    counter.sig_generations += 1
    return AuthResponse(sig_sk.owner, enc_r, shares, nonce_user, challenge.nonce_verifier, sig)


def _decide(session: AuthSession, verdict: str, reason: str, sig_sk: SigPrivateKey,
            counter: OpCounter) -> Decision:
    sig = sign(sig_sk, decision_signing_bytes(verdict, reason, session.nonce_user, session.nonce_verifier))
    counter.decision_signs += 1
    session.state = SessionState.DECIDED
    session.decision = Decision(verdict, reason, session.nonce_user, session.nonce_verifier, sig)
    return session.decision


def auth_round4_verifier(resp: AuthResponse, session: AuthSession, share2: gm.GmKeyShare,
                         sig_pk: SigPublicKey, pk: gm.GmPublicKey, mu: int, sig_sk: SigPrivateKey, *,
                         counter: OpCounter | None = None) -> Decision:
    """Finish the decryptions, measure the distance, and sign the verdict.

    Every failure becomes a signed Reject carrying the failure class.
    """
    counter = counter if counter is not None else OpCounter()
    if session.state is not SessionState.AWAIT_RESPONSE:
        raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, "session already decided")
    if resp.nonce_user != session.nonce_user or resp.nonce_verifier != session.nonce_verifier:
        return _decide(session, REJECT, "nonce_mismatch", sig_sk, counter)
    counter.sig_verifications += 1
    counter.mod_mults += 1
    if resp.user_id != session.user_id or not verify(sig_pk, resp.signing_bytes(), resp.signature):
        return _decide(session, REJECT, "bad_signature", sig_sk, counter)
    n = session.record.biohash_len
    if len(resp.randomizers) != n or len(resp.shares) != n:
        return _decide(session, REJECT, "malformed", sig_sk, counter)
    for e in resp.randomizers:
        counter.jacobi_checks += 1
        if not gm.validate(pk, e):
            return _decide(session, REJECT, "invalid_ciphertext", sig_sk, counter)
    distance = 0
    for e, c, t1, masked in zip(resp.randomizers, session.record.ciphertexts, resp.shares, session.masked):
        c2 = gm.hom_xor(pk, e, c, check=False)
        counter.mod_mults += 1
        t2 = gm.partial_decrypt(share2, c2, pk.n, check=False)
        t3 = gm.public_part(pk, c2, check=False)
        counter.share_exps += 2
        try:
            bit = gm.combine(t3, t1, t2, pk.n)
        except gm.CombineError:
            return _decide(session, REJECT, "combine_failure", sig_sk, counter)
        distance += bit ^ masked
    session.distance = distance
    return _decide(session, ACCEPT if distance <= mu else REJECT, "", sig_sk, counter)


def check_decision(decision: Decision, verifier_pk: SigPublicKey, nonce_user: Nonce, nonce_verifier: Nonce,
                   counter: OpCounter | None = None) -> bool:
    """User-side check of the signed verdict; returns True for Accept."""
    if counter is not None:
        counter.decision_verifies += 1
    if decision.nonce_user != nonce_user or decision.nonce_verifier != nonce_verifier:
        raise DecisionError(ErrorCode.BAD_SIGNATURE, "decision is bound to another session")
    if not verify(verifier_pk, decision.signing_bytes(), decision.signature):
        raise DecisionError(ErrorCode.BAD_SIGNATURE, "decision signature does not verify")
    return decision.accepted


# -- user side driver --------------------------------------------------------

@dataclass
class UserKeys:
    """What the dealer hands the user."""
    pk: gm.GmPublicKey
    share1: gm.GmKeyShare
    sig_sk: SigPrivateKey
    verifier_pk: SigPublicKey

    @property
    def user_id(self) -> str:
        return self.sig_sk.owner


@dataclass
class AuthOutcome:
    accepted: bool
    decision: Decision
    counter: OpCounter = field(default_factory=OpCounter)


class UserClient:
    """Runs the user half of both protocols over a channel.

    A channel is any object with ``exchange(frame: bytes) -> bytes``.
    """

    def __init__(self, keys: UserKeys, rng=None, clock=time.time):
        self.keys = keys
        self.rng = rng or default_rng()
        self.clock = clock

    def enroll(self, channel, biohash, overwrite: bool = False):
        record = enroll_client(self.keys.pk, self.keys.sig_sk, biohash, self.rng, overwrite=overwrite)
        reply = decode(channel.exchange(encode(record)))
        if isinstance(reply, ErrorFrame):
            raise ProtocolError(ErrorCode(reply.code), reply.message)
        if not isinstance(reply, Decision):
            raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, type(reply).__name__)
        if not verify(self.keys.verifier_pk, reply.signing_bytes(), reply.signature):
            raise DecisionError(ErrorCode.BAD_SIGNATURE, "enrollment receipt signature does not verify")
        return reply.accepted

    def authenticate(self, channel, biohash) -> AuthOutcome:
        counter = OpCounter()
        req, r = auth_round1_user(biohash, self.keys.user_id, self.rng, self.clock)
        challenge = decode(channel.exchange(encode(req)))
        if isinstance(challenge, ErrorFrame):
            raise ProtocolError(ErrorCode(challenge.code), challenge.message)
        if not isinstance(challenge, AuthChallenge):
            raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, type(challenge).__name__)
        resp = auth_round3_user(challenge, r, self.keys.sig_sk, self.keys.share1, self.keys.pk,
                                req.nonce_user, self.rng, counter=counter)
        decision = decode(channel.exchange(encode(resp)))
        if isinstance(decision, ErrorFrame):
            raise ProtocolError(ErrorCode(decision.code), decision.message)
        if not isinstance(decision, Decision):
            raise ProtocolError(ErrorCode.UNEXPECTED_MESSAGE, type(decision).__name__)
        accepted = check_decision(decision, self.keys.verifier_pk, req.nonce_user, challenge.nonce_verifier, counter)
        return AuthOutcome(accepted, decision, counter)
