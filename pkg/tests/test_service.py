import os
import random
import socket
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from thrive import storage, wire
from thrive import threshold_gm as gm
from thrive.protocol import ErrorCode, ProtocolError, UserClient, UserKeys, enroll_client
from thrive.service import CountingChannel, LoopbackChannel, TcpChannel, VerifierServer, parse_address, read_frame
from thrive.signatures import sig_keygen

from conftest import make_deployment


def test_signed_integer_encoding():
    assert storage._int_bytes(0) == b"\x00"
    assert storage._int_bytes(-1) == b"\xff"
    assert storage._int_bytes(127) == b"\x7f"
    assert storage._int_bytes(128) == b"\x00\x80"
    assert storage._int_bytes(-129) == b"\xff\x7f"
    for v in (0, -1, 128, -2 ** 600, 2 ** 600):
        assert storage._parse_int(storage._int_bytes(v)) == v
    with pytest.raises(storage.KeyFileError):
        storage._parse_int(b"\x00\x05")
    with pytest.raises(storage.KeyFileError):
        storage._parse_int(b"")


def test_frozen_gm_public_key_file(toy_keys):
    pk = toy_keys[0]
    expected = (b"THRVKEY\x01\x01" + bytes.fromhex("00000001") + b"a" + bytes.fromhex("00000001") + b"\x4d"
                + bytes.fromhex("00000001") + b"\xff" + bytes.fromhex("00000001") + b"\x03"
                + bytes.fromhex("00000001") + b"\x00")
    assert storage.dump_gm_public(pk, "a") == expected
    assert storage.load_gm_public(expected) == ("a", pk)


def test_key_round_trips(small_keys, sig_pair):
    pk, s1, s2 = small_keys
    usk, _ = sig_pair
    assert storage.load_gm_share(storage.dump_gm_share(s1, "alice")) == ("alice", s1)
    assert storage.load_gm_share(storage.dump_gm_share(s2, "alice"))[1].index == 2
    assert storage.load_sig_private(storage.dump_sig_private(usk)) == usk
    assert storage.load_sig_public(storage.dump_sig_public(usk.public)) == usk.public
    assert storage.load_biohash_key(storage.dump_biohash_key(b"\x00" * 32, "alice")) == b"\x00" * 32


def test_key_file_rejections(small_keys):
    data = storage.dump_gm_public(small_keys[0], "alice")
    for bad in (b"nope", data[:-1], data + b"\x00", data[:7] + b"\x02" + data[8:]):
        with pytest.raises(storage.KeyFileError):
            storage.load_gm_public(bad)
    with pytest.raises(storage.KeyFileError, match="role"):
        storage.load_gm_share(data)


@pytest.fixture
def dealer_dir(tmp_path, small_keys, sig_pair):
    pk, s1, s2 = small_keys
    usk, vsk = sig_pair
    storage.write_dealer_output(tmp_path, "alice", pk, s1, s2, usk, vsk, b"k" * 32)
    return tmp_path


def test_dealer_layout_splits_shares(dealer_dir, small_keys):
    _, s1, _ = small_keys
    share1_bytes = storage.dump_gm_share(s1, "alice")
    p1 = storage._int_bytes(s1.p_share)
    for path in (dealer_dir / "verifier").rglob("*"):
        if path.is_file():
            data = path.read_bytes()
            assert data != share1_bytes and p1 not in data, path
    keys, bkey = storage.load_user_material(dealer_dir, "alice")
    assert keys.share1 == s1 and bkey == b"k" * 32
    vkeys = storage.VerifierKeyStore(dealer_dir / "verifier")
    assert vkeys["alice"].share2.index == 2
    assert "bob" not in vkeys and vkeys.get("bob") is None
    with pytest.raises(KeyError):
        vkeys["bob"]
    assert oct((dealer_dir / "verifier" / "signing.key").stat().st_mode & 0o777) == "0o600"
    with pytest.raises(FileNotFoundError):
        storage.load_user_material(dealer_dir, "bob")


def test_enrollment_store(dealer_dir, small_keys, sig_pair):
    pk = small_keys[0]
    usk, _ = sig_pair
    keys = storage.VerifierKeyStore(dealer_dir / "verifier")
    store = storage.EnrollmentStore(dealer_dir / "db", keys)
    assert store.get("alice") is None and "alice" not in store
    rec = enroll_client(pk, usk, np.array([1, 0, 1], dtype=np.uint8), random.Random(1))
    store.put(rec)
    assert store.get("alice") == rec and "alice" in store
    raw = bytearray(store.get_bytes("alice"))
    raw[40] ^= 1
    store._path("alice").write_bytes(bytes(raw))
    with pytest.raises(storage.CorruptRecordError):
        store.get("alice")
    store._path("alice").write_bytes(b"junk")
    with pytest.raises(storage.CorruptRecordError):
        store.get("alice")


def test_interrupted_write_keeps_old_record(dealer_dir, small_keys, sig_pair, monkeypatch):
    pk = small_keys[0]
    usk, _ = sig_pair
    store = storage.EnrollmentStore(dealer_dir / "db", storage.VerifierKeyStore(dealer_dir / "verifier"))
    r = random.Random(2)
    old = enroll_client(pk, usk, np.array([1, 1], dtype=np.uint8), r)
    store.put(old)

    def crash(*a):
        raise OSError("power cut")
    monkeypatch.setattr(os, "replace", crash)
    with pytest.raises(OSError):
        store.put(enroll_client(pk, usk, np.array([0, 0], dtype=np.uint8), r, overwrite=True))
    monkeypatch.undo()
    assert store.get("alice") == old
    assert [p.name for p in (dealer_dir / "db").iterdir()] == [store._path("alice").name]


def test_server_config(tmp_path):
    cfg = storage.ServerConfig.parse("listen = 0.0.0.0:9000\n# comment\nmu=10\nbiohash_len=128\n")
    assert (cfg.listen, cfg.mu, cfg.biohash_len, cfg.threshold) == ("0.0.0.0:9000", 10, 128, 10)
    assert storage.ServerConfig.parse("").threshold == 64
    for bad in ("nonsense", "colour=blue"):
        with pytest.raises(ValueError):
            storage.ServerConfig.parse(bad)


def test_parse_address():
    assert parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_address("[::1]:80") == ("::1", 80)
    with pytest.raises(ValueError):
        parse_address("localhost")


def test_connection_state_machine(small_keys, sig_pair):
    _, verifier = make_deployment(small_keys, sig_pair)
    conn = verifier.connection()
    reply = wire.decode(conn.receive(b"garbage-frame"))
    assert isinstance(reply, wire.ErrorFrame) and reply.code == ErrorCode.MALFORMED and conn.closed
    conn = verifier.connection()
    stray = wire.AuthResponse("alice", (), (), wire.Nonce("a", bytes(16), 0), wire.Nonce("b", bytes(16), 0),
                              wire.Signature(1, "alice"))
    assert wire.decode(conn.receive(wire.encode(stray))).code == ErrorCode.UNEXPECTED_MESSAGE
    assert wire.decode(conn.receive(wire.encode(stray))).code == ErrorCode.UNEXPECTED_MESSAGE


def test_refusals_look_identical(small_keys, sig_pair):
    client, verifier = make_deployment(small_keys, sig_pair)
    client.enroll(LoopbackChannel(verifier), np.ones(4, dtype=np.uint8))
    stranger = UserClient(UserKeys(client.keys.pk, client.keys.share1,
                                                sig_keygen("bob", 512, random.Random(3), allow_small=True),
                                                client.keys.verifier_pk))
    replies = []
    for who, n in ((stranger, 4), (client, 3)):
        ch = CountingChannel(LoopbackChannel(verifier))
        with pytest.raises(ProtocolError):
            who.authenticate(ch, np.ones(n, dtype=np.uint8))
        replies.append(ch.frames[0][1])
    assert replies[0] == replies[1]


@pytest.fixture
def tcp_server(small_keys, sig_pair):
    client, verifier = make_deployment(small_keys, sig_pair)
    server = VerifierServer(("127.0.0.1", 0), verifier)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield client, verifier, server
    server.shutdown()
    server.server_close()


def test_tcp_end_to_end(tcp_server):
    client, verifier, server = tcp_server
    b = np.array([1, 0, 0, 1, 1, 0, 1, 0], dtype=np.uint8)
    with TcpChannel(server.server_address) as ch:
        assert client.enroll(ch, b)
    with TcpChannel(server.server_address) as ch:
        assert client.authenticate(ch, b).accepted
    b2 = b.copy()
    b2[:5] ^= 1
    with TcpChannel(server.server_address) as ch:
        assert not client.authenticate(ch, b2).accepted


def test_tcp_malformed_header(tcp_server):
    _, _, server = tcp_server
    with socket.create_connection(server.server_address, timeout=5) as s:
        s.sendall(b"HTTP/1.1 GET /\r\n\r\n")
        reply = wire.decode(read_frame(s))
        assert reply.code == ErrorCode.MALFORMED


def test_tcp_busy(small_keys, sig_pair):
    _, verifier = make_deployment(small_keys, sig_pair)
    verifier.slots = threading.BoundedSemaphore(1)
    verifier.slots.acquire()
    with VerifierServer(("127.0.0.1", 0), verifier) as server:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        with socket.create_connection(server.server_address, timeout=5) as s:
            assert wire.decode(read_frame(s)).code == ErrorCode.BUSY
        server.shutdown()


def test_concurrent_sessions(tcp_server):
    client, verifier, server = tcp_server
    b = np.zeros(8, dtype=np.uint8)
    with TcpChannel(server.server_address) as ch:
        client.enroll(ch, b)

    def run(i):
        probe = b.copy()
        probe[: i % 5] = 1
        c = UserClient(client.keys, random.Random(100 + i))
        with TcpChannel(server.server_address) as ch:
            return i % 5, c.authenticate(ch, probe).accepted

    with ThreadPoolExecutor(32) as pool:
        results = list(pool.map(run, range(32)))
    assert all(acc == (d <= 2) for d, acc in results)
    assert verifier.counter.decision_signs == 32


def test_stolen_database_reveals_nothing(small_keys, sig_pair):
    # attacker holds the stored records, share 2 and the public key, but not share 1
    pk, s1, s2 = small_keys
    client, verifier = make_deployment(small_keys, sig_pair)
    r = random.Random(4)
    template = np.array([r.getrandbits(1) for _ in range(64)], dtype=np.uint8)
    client.enroll(LoopbackChannel(verifier), template)
    record = verifier.store.get("alice")
    for c in record.ciphertexts:
        b0 = gm.public_part(pk, c)
        b2 = gm.partial_decrypt(s2, c, pk.n)
        with pytest.raises(gm.CombineError):
            gm.combine(b0, 1, b2, pk.n)
