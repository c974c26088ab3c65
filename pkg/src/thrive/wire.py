"""Binary framing for the enrollment and authentication messages.

Frame layout::

    "THRV" | version (1) | type (1) | payload length (4, BE) | payload

A payload is a sequence of fields, each a 4-byte big-endian length followed
by that many bytes. Field contents:

    text        UTF-8
    uint        minimal big-endian bytes (zero is the empty string)
    int vector  count (4) | width (2) | count * width bytes; width is the
                minimal byte length of the largest element
    bit vector  bit count (4) | bits packed MSB first, zero padded
    nonce       nested fields: actor id, 16-byte session id, 8-byte timestamp
                (an empty nonce field means "absent")
    signature   nested fields: signer id, uint value

Every value has exactly one encoding, so the bytes a signature covers can be
recomputed from a decoded message.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .signatures import Signature

MAGIC = b"THRV"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
MAX_PAYLOAD = 64 * 1024 * 1024

ENROLL, AUTH_REQ, AUTH_CHALLENGE, AUTH_RESPONSE, DECISION, ERROR = 0x01, 0x02, 0x03, 0x04, 0x05, 0x7F

ACCEPT, REJECT = "accept", "reject"

ERROR_PAD = 64


class FramingError(ValueError):
    """Malformed frame: bad magic or version, unknown type, bad lengths, trailing bytes."""


# -- field codecs ------------------------------------------------------------

def field(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def uint_bytes(v: int) -> bytes:
    if v < 0:
        raise ValueError("unsigned field got a negative value")
    return v.to_bytes((v.bit_length() + 7) // 8, "big")


def int_vector_bytes(values) -> bytes:
    values = [int(v) for v in values]
    if any(v < 0 for v in values):
        raise ValueError("int vectors hold non-negative values")
    width = max(((v.bit_length() + 7) // 8 for v in values), default=0)
    if width > 0xFFFF:
        raise ValueError("vector element too wide")
    return struct.pack(">IH", len(values), width) + b"".join(v.to_bytes(width, "big") for v in values)


def bit_vector_bytes(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 1 or np.any(bits > 1):
        raise ValueError("bit vectors hold 0/1 values")
    return struct.pack(">I", bits.size) + np.packbits(bits).tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FramingError("field runs past the end of the payload")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def field(self) -> bytes:
        (n,) = struct.unpack(">I", self.take(4))
        return self.take(n)

    def text(self) -> str:
        try:
            return self.field().decode("utf-8")
        except UnicodeDecodeError:
            raise FramingError("text field is not valid UTF-8") from None

    def uint(self) -> int:
        return _parse_uint(self.field())

    def flag(self) -> bool:
        raw = self.field()
        if raw not in (b"\x00", b"\x01"):
            raise FramingError("flag field must be 0x00 or 0x01")
        return raw == b"\x01"

    def int_vector(self) -> tuple:
        raw = _Reader(self.field())
        count, width = struct.unpack(">IH", raw.take(6))
        body = raw.take(count * width)
        raw.done()
        if width == 0:
            values = (0,) * count
        else:
            values = tuple(int.from_bytes(body[i:i + width], "big") for i in range(0, count * width, width))
        if values and width and max(values).bit_length() <= 8 * (width - 1):
            raise FramingError("int vector width is not minimal")
        if not values and width:
            raise FramingError("empty int vector must have zero width")
        return values

    def bit_vector(self) -> tuple:
        raw = _Reader(self.field())
        (count,) = struct.unpack(">I", raw.take(4))
        packed = raw.take((count + 7) // 8)
        raw.done()
        bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8))
        if np.any(bits[count:]):
            raise FramingError("bit vector padding is not zero")
        return tuple(int(b) for b in bits[:count])

    def nonce(self):
        raw = self.field()
        if not raw:
            return None
        return Nonce.from_field(raw)

    def signature(self) -> Signature:
        raw = _Reader(self.field())
        signer = raw.text()
        value = raw.uint()
        raw.done()
        return Signature(value, signer)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FramingError("trailing bytes after the last field")


def _parse_uint(raw: bytes) -> int:
    if raw[:1] == b"\x00":
        raise FramingError("integer has a leading zero byte")
    return int.from_bytes(raw, "big")


def _text(s: str) -> bytes:
    return field(s.encode("utf-8"))


def _sig(sig: Signature) -> bytes:
    return field(_text(sig.signer_id) + field(uint_bytes(sig.value)))


def _nonce(n) -> bytes:
    return field(b"" if n is None else n.to_field())


# -- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class Nonce:
    actor_id: str
    session_id: bytes
    timestamp: int

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise ValueError("session id must be 16 bytes")
        if not 0 <= self.timestamp < 2 ** 64:
            raise ValueError("timestamp must fit in 64 unsigned bits")

    def to_field(self) -> bytes:
        return _text(self.actor_id) + field(self.session_id) + field(self.timestamp.to_bytes(8, "big"))

    @classmethod
    def from_field(cls, raw: bytes) -> "Nonce":
        r = _Reader(raw)
        actor = r.text()
        sid = r.field()
        ts = r.field()
        r.done()
        if len(sid) != 16 or len(ts) != 8:
            raise FramingError("nonce has wrong field sizes")
        return cls(actor, sid, int.from_bytes(ts, "big"))


@dataclass(frozen=True)
class EnrollmentRecord:
    """Signed encrypted biohash; the ENROLL payload and the stored database record."""
    TYPE: ClassVar[int] = ENROLL
    user_id: str
    ciphertexts: tuple
    signature: Signature
    overwrite: bool = False

    @property
    def biohash_len(self) -> int:
        return len(self.ciphertexts)

    def signing_bytes(self) -> bytes:
        return record_signing_bytes(self.user_id, self.ciphertexts, self.overwrite)

    def payload(self) -> bytes:
        return (_text(self.user_id) + field(b"\x01" if self.overwrite else b"\x00")
                + field(int_vector_bytes(self.ciphertexts)) + _sig(self.signature))

    @classmethod
    def parse(cls, r: _Reader):
        return cls(user_id=r.text(), overwrite=r.flag(), ciphertexts=r.int_vector(), signature=r.signature())


@dataclass(frozen=True)
class AuthRequest:
    TYPE: ClassVar[int] = AUTH_REQ
    user_id: str
    masked: tuple       # R = r xor B_auth
    nonce_user: Nonce

    def payload(self) -> bytes:
        return _text(self.user_id) + field(bit_vector_bytes(self.masked)) + _nonce(self.nonce_user)

    @classmethod
    def parse(cls, r: _Reader):
        msg = cls(user_id=r.text(), masked=r.bit_vector(), nonce_user=r.nonce())
        if msg.nonce_user is None:
            raise FramingError("auth request needs a nonce")
        return msg


@dataclass(frozen=True)
class AuthChallenge:
    TYPE: ClassVar[int] = AUTH_CHALLENGE
    record: EnrollmentRecord
    nonce_verifier: Nonce

    def payload(self) -> bytes:
        return field(self.record.payload()) + _nonce(self.nonce_verifier)

    @classmethod
    def parse(cls, r: _Reader):
        inner = _Reader(r.field())
        record = EnrollmentRecord.parse(inner)
        inner.done()
        msg = cls(record=record, nonce_verifier=r.nonce())
        if msg.nonce_verifier is None:
            raise FramingError("challenge needs a nonce")
        return msg


@dataclass(frozen=True)
class AuthResponse:
    TYPE: ClassVar[int] = AUTH_RESPONSE
    user_id: str
    randomizers: tuple  # Enc(r_j)
    shares: tuple       # user's partial decryptions of Enc(r_j) * C_j
    nonce_user: Nonce
    nonce_verifier: Nonce
    signature: Signature

    def signing_bytes(self) -> bytes:
        return response_signing_bytes(self.user_id, self.randomizers, self.shares,
                                      self.nonce_user, self.nonce_verifier)

    def payload(self) -> bytes:
        return (_text(self.user_id) + field(int_vector_bytes(self.randomizers))
                + field(int_vector_bytes(self.shares)) + _nonce(self.nonce_user)
                + _nonce(self.nonce_verifier) + _sig(self.signature))

    @classmethod
    def parse(cls, r: _Reader):
        msg = cls(user_id=r.text(), randomizers=r.int_vector(), shares=r.int_vector(),
                  nonce_user=r.nonce(), nonce_verifier=r.nonce(), signature=r.signature())
        if msg.nonce_user is None or msg.nonce_verifier is None:
            raise FramingError("response needs both nonces")
        return msg


@dataclass(frozen=True)
class Decision:
    TYPE: ClassVar[int] = DECISION
    verdict: str
    reason: str
    nonce_user: Nonce | None
    nonce_verifier: Nonce | None
    signature: Signature

    @property
    def accepted(self) -> bool:
        return self.verdict == ACCEPT

    def signing_bytes(self) -> bytes:
        return decision_signing_bytes(self.verdict, self.reason, self.nonce_user, self.nonce_verifier)

    def payload(self) -> bytes:
        return (_text(self.verdict) + _text(self.reason) + _nonce(self.nonce_user)
                + _nonce(self.nonce_verifier) + _sig(self.signature))

    @classmethod
    def parse(cls, r: _Reader):
        msg = cls(verdict=r.text(), reason=r.text(), nonce_user=r.nonce(),
                  nonce_verifier=r.nonce(), signature=r.signature())
        if msg.verdict not in (ACCEPT, REJECT):
            raise FramingError(f"unknown verdict {msg.verdict!r}")
        return msg


@dataclass(frozen=True)
class ErrorFrame:
    """Failure report. The message is padded to a constant width so that the
    frame size does not reveal which check failed."""
    TYPE: ClassVar[int] = ERROR
    code: int
    message: str = ""

    def payload(self) -> bytes:
        text = self.message.encode("utf-8")[:ERROR_PAD]
        return field(bytes([self.code])) + field(text.ljust(ERROR_PAD, b"\x00"))

    @classmethod
    def parse(cls, r: _Reader):
        code = r.field()
        text = r.field()
        if len(code) != 1 or len(text) != ERROR_PAD:
            raise FramingError("error frame has the wrong shape")
        stripped = text.rstrip(b"\x00")
        if b"\x00" in stripped:
            raise FramingError("error text contains NUL")
        try:
            return cls(code[0], stripped.decode("utf-8"))
        except UnicodeDecodeError:
            raise FramingError("error text is not UTF-8") from None


MESSAGE_TYPES = {cls.TYPE: cls for cls in (EnrollmentRecord, AuthRequest, AuthChallenge,
                                           AuthResponse, Decision, ErrorFrame)}


# -- signing inputs ----------------------------------------------------------

def record_signing_bytes(user_id: str, ciphertexts, overwrite: bool = False) -> bytes:
    return (b"THRIVE/enroll\x00" + _text(user_id) + field(b"\x01" if overwrite else b"\x00")
            + field(int_vector_bytes(ciphertexts)))


def response_signing_bytes(user_id, randomizers, shares, nonce_user, nonce_verifier) -> bytes:
    return (b"THRIVE/auth-response\x00" + _text(user_id) + field(int_vector_bytes(randomizers))
            + field(int_vector_bytes(shares)) + _nonce(nonce_user) + _nonce(nonce_verifier))


def decision_signing_bytes(verdict, reason, nonce_user, nonce_verifier) -> bytes:
    return (b"THRIVE/decision\x00" + _text(verdict) + _text(reason)
            + _nonce(nonce_user) + _nonce(nonce_verifier))


# -- frames ------------------------------------------------------------------

def encode(msg) -> bytes:
    payload = msg.payload()
    if len(payload) > MAX_PAYLOAD:
        raise FramingError("payload too large")
    return HEADER.pack(MAGIC, VERSION, msg.TYPE, len(payload)) + payload


def parse_header(header: bytes) -> tuple:
    """Check a frame header; returns (type, payload length)."""
    if len(header) != HEADER.size:
        raise FramingError("truncated header")
    magic, version, mtype, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise FramingError("bad magic")
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if mtype not in MESSAGE_TYPES:
        raise FramingError(f"unknown message type 0x{mtype:02x}")
    if length > MAX_PAYLOAD:
        raise FramingError("payload length exceeds limit")
    return mtype, length


def decode(frame: bytes):
    mtype, length = parse_header(frame[:HEADER.size])
    if len(frame) != HEADER.size + length:
        raise FramingError("frame length does not match header")
    r = _Reader(frame[HEADER.size:])
    try:
        msg = MESSAGE_TYPES[mtype].parse(r)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FramingError):
            raise
        raise FramingError(str(exc)) from None
    r.done()
    return msg
