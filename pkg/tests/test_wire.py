import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thrive import wire
from thrive.signatures import Signature

NU = wire.Nonce("alice", bytes(range(16)), 1_700_000_000)
NV = wire.Nonce("verifier", bytes(16), 1_700_000_001)
SIG = Signature(0xABCDEF, "alice")


def sample_messages():
    rec = wire.EnrollmentRecord("alice", (4, 73, 1, 76), SIG, overwrite=True)
    return [
        rec,
        wire.AuthRequest("alice", (1, 0, 1, 1, 0, 0, 0, 0, 1), NU),
        wire.AuthChallenge(rec, NV),
        wire.AuthResponse("alice", (4, 300), (0, 65536), NU, NV, SIG),
        wire.Decision(wire.ACCEPT, "", NU, NV, Signature(5, "verifier")),
        wire.Decision(wire.ACCEPT, "enrolled", None, NV, Signature(5, "verifier")),
        wire.Decision(wire.REJECT, "bad_signature", NU, NV, Signature(0, "verifier")),
        wire.ErrorFrame(2, "request rejected"),
    ]


def test_frozen_auth_request_vector():
    # built by hand from the layout description
    msg = wire.AuthRequest("a", (1, 0, 1), wire.Nonce("a", b"\x11" * 16, 258))
    nonce = (struct.pack(">I", 1) + b"a" + struct.pack(">I", 16) + b"\x11" * 16
             + struct.pack(">I", 8) + (258).to_bytes(8, "big"))
    payload = (struct.pack(">I", 1) + b"a"
               + struct.pack(">I", 5) + struct.pack(">I", 3) + b"\xa0"
               + struct.pack(">I", len(nonce)) + nonce)
    expected = b"THRV\x01\x02" + struct.pack(">I", len(payload)) + payload
    assert wire.encode(msg) == expected
    assert wire.decode(expected) == msg


def test_frozen_int_vector_encoding():
    assert wire.int_vector_bytes([1, 256]) == bytes.fromhex("00000002" "0002" "0001" "0100")
    assert wire.int_vector_bytes([]) == bytes.fromhex("00000000" "0000")
    assert wire.uint_bytes(0) == b""
    with pytest.raises(ValueError):
        wire.uint_bytes(-1)
    with pytest.raises(ValueError):
        wire.int_vector_bytes([-1])
    with pytest.raises(ValueError):
        wire.bit_vector_bytes([0, 2])


def test_error_frames_have_constant_size():
    sizes = {len(wire.encode(wire.ErrorFrame(c, m))) for c, m in
             [(1, ""), (2, "request rejected"), (8, "x" * 200)]}
    assert sizes == {wire.HEADER.size + 4 + 1 + 4 + wire.ERROR_PAD}


@pytest.mark.parametrize("msg", sample_messages(), ids=lambda m: type(m).__name__)
def test_round_trip(msg):
    frame = wire.encode(msg)
    assert wire.decode(frame) == msg
    assert wire.encode(wire.decode(frame)) == frame


@pytest.mark.parametrize("msg", sample_messages(), ids=lambda m: type(m).__name__)
def test_every_truncation_rejected(msg):
    frame = wire.encode(msg)
    for cut in range(len(frame)):
        with pytest.raises(wire.FramingError):
            wire.decode(frame[:cut])
    with pytest.raises(wire.FramingError):
        wire.decode(frame + b"\x00")


@pytest.mark.parametrize("msg", sample_messages(), ids=lambda m: type(m).__name__)
def test_bit_flips_never_decode_to_a_different_encoding(msg):
    # any flipped frame either fails to parse or re-encodes to exactly itself
    frame = wire.encode(msg)
    for i in range(len(frame) * 8):
        bad = bytearray(frame)
        bad[i // 8] ^= 0x80 >> (i % 8)
        bad = bytes(bad)
        try:
            out = wire.decode(bad)
        except wire.FramingError:
            continue
        assert out != msg
        assert wire.encode(out) == bad


@pytest.mark.parametrize("header, reason", [
    (b"XXXX\x01\x01\x00\x00\x00\x00", "magic"),
    (b"THRV\x02\x01\x00\x00\x00\x00", "version"),
    (b"THRV\x01\x09\x00\x00\x00\x00", "type"),
    (b"THRV\x01\x01\xff\xff\xff\xff", "limit"),
    (b"THRV\x01", "truncated"),
])
def test_header_rejections(header, reason):
    with pytest.raises(wire.FramingError, match=reason):
        wire.parse_header(header)


def _f(b):
    return struct.pack(">I", len(b)) + b


def _decision_frame(sig_value: bytes) -> bytes:
    sig = _f(b"alice") + _f(sig_value)
    payload = _f(b"accept") + _f(b"") + _f(b"") + _f(b"") + _f(sig)
    return b"THRV\x01\x05" + struct.pack(">I", len(payload)) + payload


def test_non_minimal_forms_rejected():
    assert wire.decode(_decision_frame(b"\x05")).signature == Signature(5, "alice")
    with pytest.raises(wire.FramingError):
        wire.decode(_decision_frame(b"\x00\x05"))


def test_non_minimal_vector_width_and_padding():
    rec = wire.EnrollmentRecord("u", (1, 2), SIG)
    frame = wire.encode(rec)
    wide = frame.replace(bytes.fromhex("00000002000101" "02"), bytes.fromhex("0000000200020001" "0002"))
    wide = wide[:6] + struct.pack(">I", len(wide) - 10) + wide[10:]
    # the outer field length changed too
    wide = wide.replace(struct.pack(">I", 8) + bytes.fromhex("0000000200020001"),
                        struct.pack(">I", 10) + bytes.fromhex("0000000200020001"))
    with pytest.raises(wire.FramingError):
        wire.decode(wide)
    req = wire.encode(wire.AuthRequest("u", (1, 0, 1), NU))
    padded = req.replace(struct.pack(">I", 3) + b"\xa0", struct.pack(">I", 3) + b"\xa1")
    with pytest.raises(wire.FramingError, match="padding"):
        wire.decode(padded)


def test_unknown_verdict_and_missing_nonces():
    bad = wire.Decision("maybe", "", NU, NV, SIG)
    with pytest.raises(wire.FramingError):
        wire.decode(wire.encode(bad))
    with pytest.raises(wire.FramingError):
        wire.decode(wire.encode(wire.AuthRequest("u", (1,), None)))


def test_nonce_validation():
    with pytest.raises(ValueError):
        wire.Nonce("a", b"short", 1)
    with pytest.raises(ValueError):
        wire.Nonce("a", bytes(16), -1)


def test_signing_bytes_bind_every_field():
    base = wire.record_signing_bytes("alice", (4, 73), False)
    assert base != wire.record_signing_bytes("alice", (4, 73), True)
    assert base != wire.record_signing_bytes("alicf", (4, 73), False)
    assert base != wire.record_signing_bytes("alice", (73, 4), False)
    d = wire.decision_signing_bytes(wire.ACCEPT, "", NU, NV)
    assert d != wire.decision_signing_bytes(wire.REJECT, "", NU, NV)
    assert d != wire.decision_signing_bytes(wire.ACCEPT, "", NV, NU)
    assert d != wire.decision_signing_bytes(wire.ACCEPT, "", None, NV)
    # domain tags keep the three signed objects apart
    assert len({base[:10], d[:10], wire.response_signing_bytes("a", (), (), NU, NV)[:10]}) == 3


texts = st.text(max_size=12)
nonces = st.builds(wire.Nonce, texts, st.binary(min_size=16, max_size=16), st.integers(0, 2 ** 64 - 1))
sigs = st.builds(Signature, st.integers(0, 2 ** 1100), texts)
ints = st.lists(st.integers(0, 2 ** 1100), max_size=8).map(tuple)


@settings(max_examples=150)
@given(st.one_of(
    st.builds(wire.EnrollmentRecord, texts, ints, sigs, st.booleans()),
    st.builds(wire.AuthRequest, texts, st.lists(st.integers(0, 1), max_size=40).map(tuple), nonces),
    st.builds(wire.AuthResponse, texts, ints, ints, nonces, nonces, sigs),
    st.builds(wire.Decision, st.sampled_from([wire.ACCEPT, wire.REJECT]), texts,
              st.one_of(st.none(), nonces), st.one_of(st.none(), nonces), sigs),
))
def test_round_trip_property(msg):
    assert wire.decode(wire.encode(msg)) == msg


@settings(max_examples=300)
@given(st.binary(max_size=200))
def test_garbage_never_crashes(data):
    frame = b"THRV\x01" + bytes([random.Random(len(data)).choice([1, 2, 3, 4, 5, 0x7F])]) \
        + struct.pack(">I", len(data)) + data
    try:
        wire.decode(frame)
    except wire.FramingError:
        pass
