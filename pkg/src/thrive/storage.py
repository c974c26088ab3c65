"""On-disk key material, the enrollment database, and the server config file.

Key file layout::

    "THRVKEY" | version (1) | role (1) | fields...

Each field is a 4-byte big-endian length followed by its bytes. Integers are
minimal two's-complement big-endian (p0 and q0 can be negative), text is
UTF-8. Field order per role:

    GM_PUBLIC    user id, N, p0, q0, security bits
    GM_SHARE     user id, index, p share, q share
    SIG_PUBLIC   owner, hash name, n, e
    SIG_PRIVATE  owner, hash name, n, e, d, p, q
    BIOHASH_KEY  user id, key bytes

Directory layout written by the dealer::

    <root>/verifier/signing.key
    <root>/verifier/users/<uid-hash>/{gm_public.key, gm_share2.key, user_sig.pub}
    <root>/users/<uid-hash>/{gm_public.key, gm_share1.key, user_sig.key,
                             verifier_sig.pub, biohash.key}
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from .protocol import UserKeys
from .signatures import HASH_NAME, SigPrivateKey, SigPublicKey, verify
from .threshold_gm import GmKeyShare, GmPublicKey
from .wire import EnrollmentRecord, FramingError, decode, encode

KEY_MAGIC = b"THRVKEY"
KEY_VERSION = 1
GM_PUBLIC, GM_SHARE, SIG_PUBLIC, SIG_PRIVATE, BIOHASH_KEY = 1, 2, 3, 4, 5


class KeyFileError(ValueError):
    pass


class CorruptRecordError(Exception):
    """A stored record no longer verifies under the owner's signing key."""


def user_dir_name(user_id: str) -> str:
    return hashlib.sha256(user_id.encode("utf-8")).hexdigest()


# -- key files ---------------------------------------------------------------

def _int_bytes(v: int) -> bytes:
    return v.to_bytes(v.bit_length() // 8 + 1, "big", signed=True)


def _parse_int(raw: bytes) -> int:
    v = int.from_bytes(raw, "big", signed=True)
    if not raw or _int_bytes(v) != raw:
        raise KeyFileError("integer field is not minimally encoded")
    return v


def encode_key(role: int, *values) -> bytes:
    out = [KEY_MAGIC, bytes([KEY_VERSION, role])]
    for v in values:
        if isinstance(v, str):
            raw = v.encode("utf-8")
        elif isinstance(v, bytes):
            raw = v
        else:
            raw = _int_bytes(v)
        out.append(struct.pack(">I", len(raw)) + raw)
    return b"".join(out)


def _split_fields(data: bytes, expected_role: int, count: int) -> list:
    if data[:7] != KEY_MAGIC or len(data) < 9:
        raise KeyFileError("not a THRIVE key file")
    if data[7] != KEY_VERSION:
        raise KeyFileError(f"unsupported key file version {data[7]}")
    if data[8] != expected_role:
        raise KeyFileError(f"key file role {data[8]} where {expected_role} was expected")
    pos, out = 9, []
    while pos < len(data):
        if pos + 4 > len(data):
            raise KeyFileError("truncated key file")
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        if pos + 4 + n > len(data):
            raise KeyFileError("truncated key file")
        out.append(data[pos + 4:pos + 4 + n])
        pos += 4 + n
    if len(out) != count:
        raise KeyFileError(f"expected {count} fields, found {len(out)}")
    return out


def dump_gm_public(pk: GmPublicKey, user_id: str) -> bytes:
    return encode_key(GM_PUBLIC, user_id, pk.n, pk.p0, pk.q0, pk.security_bits)


def load_gm_public(data: bytes) -> tuple:
    uid, n, p0, q0, sec = _split_fields(data, GM_PUBLIC, 5)
    return uid.decode("utf-8"), GmPublicKey(_parse_int(n), _parse_int(p0), _parse_int(q0), _parse_int(sec))


def dump_gm_share(share: GmKeyShare, user_id: str) -> bytes:
    return encode_key(GM_SHARE, user_id, share.index, share.p_share, share.q_share)


def load_gm_share(data: bytes) -> tuple:
    uid, idx, p, q = _split_fields(data, GM_SHARE, 4)
    return uid.decode("utf-8"), GmKeyShare(_parse_int(p), _parse_int(q), _parse_int(idx))


def dump_sig_public(pk: SigPublicKey) -> bytes:
    return encode_key(SIG_PUBLIC, pk.owner, HASH_NAME, pk.n, pk.e)


def load_sig_public(data: bytes) -> SigPublicKey:
    owner, hname, n, e = _split_fields(data, SIG_PUBLIC, 4)
    if hname.decode() != HASH_NAME:
        raise KeyFileError(f"unsupported signature hash {hname!r}")
    return SigPublicKey(_parse_int(n), _parse_int(e), owner.decode("utf-8"))


def dump_sig_private(sk: SigPrivateKey) -> bytes:
    return encode_key(SIG_PRIVATE, sk.owner, HASH_NAME, sk.n, sk.e, sk.d, sk.p, sk.q)


def load_sig_private(data: bytes) -> SigPrivateKey:
    owner, hname, *ints = _split_fields(data, SIG_PRIVATE, 7)
    if hname.decode() != HASH_NAME:
        raise KeyFileError(f"unsupported signature hash {hname!r}")
    n, e, d, p, q = (_parse_int(v) for v in ints)
    return SigPrivateKey(n, e, d, p, q, owner.decode("utf-8"))


def dump_biohash_key(key: bytes, user_id: str) -> bytes:
    return encode_key(BIOHASH_KEY, user_id, key)


def load_biohash_key(data: bytes) -> bytes:
    _, key = _split_fields(data, BIOHASH_KEY, 2)
    return key


def atomic_write(path, data: bytes, mode: int = 0o600) -> None:
    """Write via a temp file in the same directory, fsync, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, mode)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- dealer output -----------------------------------------------------------

def write_dealer_output(root, user_id: str, pk: GmPublicKey, share1: GmKeyShare, share2: GmKeyShare,
                        user_sig: SigPrivateKey, verifier_sig: SigPrivateKey, biohash_key: bytes) -> None:
    root = Path(root)
    vdir = root / "verifier"
    udir = root / "users" / user_dir_name(user_id)
    vudir = vdir / "users" / user_dir_name(user_id)
    atomic_write(vdir / "signing.key", dump_sig_private(verifier_sig))
    atomic_write(vudir / "gm_public.key", dump_gm_public(pk, user_id), 0o644)
    atomic_write(vudir / "gm_share2.key", dump_gm_share(share2, user_id))
    atomic_write(vudir / "user_sig.pub", dump_sig_public(user_sig.public), 0o644)
    atomic_write(udir / "gm_public.key", dump_gm_public(pk, user_id), 0o644)
    atomic_write(udir / "gm_share1.key", dump_gm_share(share1, user_id))
    atomic_write(udir / "user_sig.key", dump_sig_private(user_sig))
    atomic_write(udir / "verifier_sig.pub", dump_sig_public(verifier_sig.public), 0o644)
    atomic_write(udir / "biohash.key", dump_biohash_key(biohash_key, user_id))


def load_verifier_signing_key(verifier_root) -> SigPrivateKey:
    return load_sig_private(Path(verifier_root, "signing.key").read_bytes())


def load_user_material(root, user_id: str):
    """Returns (UserKeys, biohash key) from a dealer output directory."""
    udir = Path(root) / "users" / user_dir_name(user_id)
    if not udir.is_dir():
        raise FileNotFoundError(f"no key material for user {user_id!r} under {root}")
    uid, pk = load_gm_public((udir / "gm_public.key").read_bytes())
    _, share1 = load_gm_share((udir / "gm_share1.key").read_bytes())
    sig_sk = load_sig_private((udir / "user_sig.key").read_bytes())
    verifier_pk = load_sig_public((udir / "verifier_sig.pub").read_bytes())
    bkey = load_biohash_key((udir / "biohash.key").read_bytes())
    if uid != user_id or sig_sk.owner != user_id or share1.index != 1:
        raise KeyFileError("user key files do not belong together")
    return UserKeys(pk, share1, sig_sk, verifier_pk), bkey


@dataclass(frozen=True)
class VerifierUserKeys:
    pk: GmPublicKey
    share2: GmKeyShare
    sig_pk: SigPublicKey


class VerifierKeyStore:
    """Per-user verifier material, loaded lazily from ``<verifier root>/users``.

    Holds only share index 2 and public keys.
    """

    def __init__(self, verifier_root):
        self.root = Path(verifier_root)
        self._cache = {}
        self._lock = threading.Lock()

    def get(self, user_id: str):
        with self._lock:
            if user_id in self._cache:
                return self._cache[user_id]
        d = self.root / "users" / user_dir_name(user_id)
        if not d.is_dir():
            return None
        uid, pk = load_gm_public((d / "gm_public.key").read_bytes())
        _, share2 = load_gm_share((d / "gm_share2.key").read_bytes())
        sig_pk = load_sig_public((d / "user_sig.pub").read_bytes())
        if uid != user_id or sig_pk.owner != user_id or share2.index != 2:
            raise KeyFileError(f"verifier key files for {user_id!r} do not belong together")
        keys = VerifierUserKeys(pk, share2, sig_pk)
        with self._lock:
            self._cache[user_id] = keys
        return keys

    def __getitem__(self, user_id):
        keys = self.get(user_id)
        if keys is None:
            raise KeyError(user_id)
        return keys

    def __contains__(self, user_id):
        return self.get(user_id) is not None


# -- enrollment database -----------------------------------------------------

class EnrollmentStore:
    """One file per user holding the encoded enrollment frame.

    ``keys`` maps user id to an object with a ``sig_pk`` attribute; every read
    re-verifies the record signature.
    """

    def __init__(self, root, keys):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.keys = keys
        self._locks = {}
        self._locks_guard = threading.Lock()

    def _path(self, user_id: str) -> Path:
        return self.root / (user_dir_name(user_id) + ".rec")

    def _lock(self, user_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(user_id, threading.Lock())

    def put(self, record: EnrollmentRecord) -> None:
        with self._lock(record.user_id):
            atomic_write(self._path(record.user_id), encode(record))

    def get(self, user_id: str):
        path = self._path(user_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            record = decode(data)
        except FramingError as exc:
            raise CorruptRecordError(f"record for {user_id!r} does not parse: {exc}") from None
        keys = self.keys.get(user_id)
        if (not isinstance(record, EnrollmentRecord) or record.user_id != user_id or keys is None
                or not verify(keys.sig_pk, record.signing_bytes(), record.signature)):
            raise CorruptRecordError(f"record for {user_id!r} fails signature verification")
        return record

    def get_bytes(self, user_id: str):
        try:
            return self._path(user_id).read_bytes()
        except FileNotFoundError:
            return None

    def __contains__(self, user_id):
        return self._path(user_id).exists()


# -- config ------------------------------------------------------------------

CONFIG_DEFAULTS = {
    "listen": "127.0.0.1:7878",
    "db_root": "thrive-db",
    "key_root": "thrive-keys/verifier",
    "biohash_len": "256",
    "mu": "",
    "skew_secs": "120",
    "max_sessions": "64",
}


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:7878"
    db_root: str = "thrive-db"
    key_root: str = "thrive-keys/verifier"
    biohash_len: int = 256
    mu: int | None = None
    skew_secs: int = 120
    max_sessions: int = 64

    @property
    def threshold(self) -> int:
        return self.biohash_len // 4 if self.mu is None else self.mu

    @classmethod
    def parse(cls, text: str) -> "ServerConfig":
        values = dict(CONFIG_DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in values:
                raise ValueError(f"config line {lineno}: unknown key {k!r}")
            values[k] = v
        return cls(listen=values["listen"], db_root=values["db_root"], key_root=values["key_root"],
                   biohash_len=int(values["biohash_len"]), mu=int(values["mu"]) if values["mu"] else None,
                   skew_secs=int(values["skew_secs"]), max_sessions=int(values["max_sessions"]))

    @classmethod
    def load(cls, path) -> "ServerConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))
