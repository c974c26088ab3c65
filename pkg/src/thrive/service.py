"""Verifier daemon and the client-side transports.

One connection carries one protocol run: either a single ENROLL frame
answered by a signed receipt, or the four-round authentication. Any failure
is answered with an ERROR frame and the connection is closed.
"""
from __future__ import annotations

import hashlib
import logging
import socket
import socketserver
import threading
import time

from .numtheory import default_rng
from .protocol import (AuthSession, ErrorCode, OpCounter, ProtocolError, ReplayCache, SessionState,
                       auth_round2_verifier, auth_round4_verifier, enroll_server, nonce_gen)
from .signatures import SigPrivateKey, sign
from .storage import CorruptRecordError, KeyFileError
from .wire import (ACCEPT, HEADER, AuthRequest, AuthResponse, Decision, EnrollmentRecord, ErrorFrame,
                   FramingError, decision_signing_bytes, decode, encode, parse_header)

log = logging.getLogger("thrive.verifier")


def _tag(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()[:12]


def _event(**kv) -> None:
    log.info(" ".join(f"{k}={v}" for k, v in kv.items()))


class Verifier:
    """Verifier-side state shared by all connections.

    ``keys`` maps user id to VerifierUserKeys (``.get`` returning None when
    unknown); ``store`` is the enrollment database.
    """

    def __init__(self, keys, store, sig_sk: SigPrivateKey, *, biohash_len: int | None = None,
                 mu: int | None = None, skew: int = 120, max_sessions: int = 64, rng=None,
                 clock=time.time):
        self.keys = keys
        self.store = store
        self.sig_sk = sig_sk
        self.biohash_len = biohash_len
        self.mu = mu
        self.skew = skew
        self.rng = rng or default_rng()
        self.clock = clock
        self.replay = ReplayCache(skew)
        self.slots = threading.BoundedSemaphore(max_sessions)
        self._counter = OpCounter()
        self._counter_lock = threading.Lock()

    @property
    def counter(self) -> OpCounter:
        with self._counter_lock:
            return OpCounter(**self._counter.as_dict())

    def _add(self, c: OpCounter) -> None:
        with self._counter_lock:
            self._counter = self._counter + c

    def threshold(self, n: int) -> int:
        return n // 4 if self.mu is None else self.mu

    def connection(self) -> "VerifierConnection":
        return VerifierConnection(self)


class VerifierConnection:
    """Per-connection state machine. Feed it frames, send back what it returns."""

    def __init__(self, verifier: Verifier):
        self.v = verifier
        self.session: AuthSession | None = None
        self.closed = False
        self.counter = OpCounter()
        self.distance: int | None = None

    def _error(self, code: ErrorCode, message: str = "") -> bytes:
        self.closed = True
        return encode(ErrorFrame(int(code), message))

    def receive(self, frame: bytes) -> bytes:
        if self.closed:
            return self._error(ErrorCode.UNEXPECTED_MESSAGE, "connection finished")
        try:
            msg = decode(frame)
        except FramingError as exc:
            _event(event="malformed", detail=str(exc).replace(" ", "_"))
            return self._error(ErrorCode.MALFORMED, "malformed frame")
        try:
            if isinstance(msg, EnrollmentRecord) and self.session is None:
                return self._enroll(msg)
            if isinstance(msg, AuthRequest) and self.session is None:
                return self._challenge(msg)
            if isinstance(msg, AuthResponse) and self.session is not None \
                    and self.session.state is SessionState.AWAIT_RESPONSE:
                return self._decide(msg)
            return self._error(ErrorCode.UNEXPECTED_MESSAGE, type(msg).__name__)
        except ProtocolError as exc:
            _event(event="refused", code=exc.code.name.lower())
            # round-2 refusals all look alike on the wire
            text = "request rejected" if exc.code is ErrorCode.REQUEST_REJECTED else exc.code.name.lower()
            return self._error(exc.code, text)
        except (CorruptRecordError, KeyFileError, OSError) as exc:
            log.error("event=store_failure error=%s", type(exc).__name__)
            return self._error(ErrorCode.STORE_FAILURE, "store failure")

    def _enroll(self, record: EnrollmentRecord) -> bytes:
        v = self.v
        keys = v.keys.get(record.user_id)
        if keys is None:
            raise ProtocolError(ErrorCode.BAD_SIGNATURE, "no signing key on file")
        enroll_server(record, keys.sig_pk, keys.pk, v.store, biohash_len=v.biohash_len)
        self.counter.sig_verifications += 1
        self.counter.jacobi_checks += record.biohash_len
        nv = nonce_gen("verifier", v.rng, v.clock)
        sig = sign(v.sig_sk, decision_signing_bytes(ACCEPT, "enrolled", None, nv))
        self.closed = True
        v._add(self.counter)
        _event(event="enrolled", user=_tag(record.user_id), n=record.biohash_len)
        return encode(Decision(ACCEPT, "enrolled", None, nv, sig))

    def _challenge(self, req: AuthRequest) -> bytes:
        v = self.v
        keys = v.keys.get(req.user_id)
        if keys is None:
            raise ProtocolError(ErrorCode.REQUEST_REJECTED, "unknown user")
        self.session, challenge = auth_round2_verifier(
            req, v.store, v.rng, replay_cache=v.replay, biohash_len=v.biohash_len,
            clock=v.clock, skew=v.skew)
        _event(event="challenge", user=_tag(req.user_id), session=req.nonce_user.session_id.hex()[:12],
               masked=_tag(bytes(req.masked)))
        return encode(challenge)

    def _decide(self, resp: AuthResponse) -> bytes:
        v, s = self.v, self.session
        keys = v.keys.get(s.user_id)
        decision = auth_round4_verifier(resp, s, keys.share2, keys.sig_pk, keys.pk,
                                        v.threshold(s.record.biohash_len), v.sig_sk, counter=self.counter)
        self.distance = s.distance
        self.closed = True
        v._add(self.counter)
        _event(event="decision", user=_tag(s.user_id), session=s.nonce_user.session_id.hex()[:12],
               verdict=decision.verdict, reason=decision.reason or "-")
        return encode(decision)


# -- transports --------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, HEADER.size)
    _, length = parse_header(header)
    return header + _recv_exact(sock, length)


class LoopbackChannel:
    """In-process transport straight into a VerifierConnection."""

    def __init__(self, verifier: Verifier):
        self.conn = verifier.connection()

    def exchange(self, frame: bytes) -> bytes:
        return self.conn.receive(frame)

    def close(self) -> None:
        pass


class TcpChannel:
    def __init__(self, address, timeout: float = 60.0):
        host, port = parse_address(address) if isinstance(address, str) else address
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def exchange(self, frame: bytes) -> bytes:
        self.sock.sendall(frame)
        return read_frame(self.sock)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CountingChannel:
    """Wraps a channel and tallies the framed bytes in each direction."""

    def __init__(self, inner):
        self.inner = inner
        self.sent = 0
        self.received = 0
        self.frames = []

    def exchange(self, frame: bytes) -> bytes:
        reply = self.inner.exchange(frame)
        self.sent += len(frame)
        self.received += len(reply)
        self.frames.append((frame, reply))
        return reply

    def close(self) -> None:
        self.inner.close()


def parse_address(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host.strip("[]"), int(port)


# -- server ------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        verifier: Verifier = self.server.verifier
        sock: socket.socket = self.request
        sock.settimeout(self.server.io_timeout)
        if not verifier.slots.acquire(blocking=False):
            sock.sendall(encode(ErrorFrame(int(ErrorCode.BUSY), "busy")))
            return
        try:
            conn = verifier.connection()
            while not conn.closed:
                try:
                    frame = read_frame(sock)
                except FramingError:
                    sock.sendall(encode(ErrorFrame(int(ErrorCode.MALFORMED), "malformed frame")))
                    return
                except (ConnectionError, socket.timeout):
                    return
                sock.sendall(conn.receive(frame))
        finally:
            verifier.slots.release()


class VerifierServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, verifier: Verifier, io_timeout: float = 60.0):
        self.verifier = verifier
        self.io_timeout = io_timeout
        super().__init__(address, _Handler)


def serve(address, verifier: Verifier, stop: threading.Event | None = None) -> None:
    """Accept connections until ``stop`` is set or the process is interrupted."""
    host, port = parse_address(address) if isinstance(address, str) else address
    with VerifierServer((host, port), verifier) as server:
        _event(event="listening", address=f"{server.server_address[0]}:{server.server_address[1]}")
        if stop is None:
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                pass
        else:
            t = threading.Thread(target=server.serve_forever, daemon=True)
            t.start()
            stop.wait()
            server.shutdown()
            t.join()
        _event(event="stopped")
