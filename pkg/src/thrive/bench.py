"""Bandwidth, operation-count and timing measurements for authentication runs."""
from __future__ import annotations

import csv
import platform
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import threshold_gm as gm
from .protocol import MemoryStore, OpCounter, UserClient, UserKeys
from .service import CountingChannel, LoopbackChannel, TcpChannel, Verifier, VerifierServer
from .signatures import sig_keygen
from .storage import VerifierUserKeys

# Published reference measurements (Kbit; user/verifier ms), keyed by biohash length.
REFERENCE_KBITS = {112: 348, 192: 594, 256: 791, 512: 1577, 2048: 6296}
REFERENCE_MS_2_4GHZ = {112: (151, 449), 192: (258, 769), 256: (343, 1026), 512: (685, 2050)}
REFERENCE_MS_3_2GHZ = {112: (113, 337), 192: (193, 577), 256: (257, 769), 512: (514, 1537), 2048: (2051, 6146)}
LINK_BITS_PER_SEC = 10_000_000


def expected_counts(n: int) -> dict:
    """Per-run totals for both parties in the complexity accounting."""
    return {"encryptions": n, "share_exps": 3 * n, "sig_generations": 1, "sig_verifications": 2,
            "jacobi_checks": n, "mod_mults": 2 * n + 2}


def count_mismatches(n: int, counter: OpCounter) -> dict:
    got = counter.as_dict()
    return {k: (got[k], want) for k, want in expected_counts(n).items() if got[k] != want}


def cpu_model() -> str:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


@dataclass
class BenchReport:
    biohash_len: int
    modulus_bits: int
    bytes_user_to_verifier: int
    bytes_verifier_to_user: int
    user_ms: float
    verifier_ms: float
    iterations: int
    op_counters: dict = field(default_factory=dict)
    transport: str = "loopback"
    cpu: str = ""

    @property
    def total_bits(self) -> int:
        return 8 * (self.bytes_user_to_verifier + self.bytes_verifier_to_user)

    @property
    def total_kbits(self) -> float:
        return self.total_bits / 1000

    @property
    def total_ms(self) -> float:
        return self.user_ms + self.verifier_ms

    @property
    def link_ms(self) -> float:
        return 1000 * self.total_bits / LINK_BITS_PER_SEC

    @property
    def ref_kbits(self):
        return REFERENCE_KBITS.get(self.biohash_len)

    @property
    def kbits_deviation(self):
        ref = self.ref_kbits
        return None if ref is None else (self.total_kbits - ref) / ref

    def row(self) -> dict:
        out = asdict(self)
        out.pop("op_counters")
        out.update({f"ops_{k}": v for k, v in self.op_counters.items()})
        p24 = REFERENCE_MS_2_4GHZ.get(self.biohash_len, (None, None))
        p32 = REFERENCE_MS_3_2GHZ.get(self.biohash_len, (None, None))
        out.update(total_kbits=round(self.total_kbits, 3), ref_kbits=self.ref_kbits,
                   total_ms=round(self.total_ms, 3), link_ms_10mbit=round(self.link_ms, 1),
                   ref_user_ms_2_4ghz=p24[0], ref_verifier_ms_2_4ghz=p24[1],
                   ref_user_ms_3_2ghz=p32[0], ref_verifier_ms_3_2ghz=p32[1])
        return out


class _TimedChannel(CountingChannel):
    """Counts bytes and the time spent waiting on the verifier."""

    def __init__(self, inner):
        super().__init__(inner)
        self.remote_seconds = 0.0

    def exchange(self, frame: bytes) -> bytes:
        t0 = time.perf_counter()
        reply = super().exchange(frame)
        self.remote_seconds += time.perf_counter() - t0
        return reply


def make_deployment(prime_bits: int = 512, sig_bits: int = 1024, user_id: str = "bench-user", rng=None,
                    biohash_len: int | None = None, mu: int | None = None):
    """Dealer setup for one user plus an in-memory verifier. Returns (client, verifier)."""
    rng = rng or random.SystemRandom()
    pk, s1, s2 = gm.dealer_keygen(prime_bits, rng)
    small = sig_bits < 1024
    usk = sig_keygen(user_id, sig_bits, rng, allow_small=small)
    vsk = sig_keygen("verifier", sig_bits, rng, allow_small=small)
    verifier = Verifier({user_id: VerifierUserKeys(pk, s2, usk.public)}, MemoryStore(), vsk,
                        biohash_len=biohash_len, mu=mu, rng=rng)
    return UserClient(UserKeys(pk, s1, usk, vsk.public), rng), verifier


def bench_length(n: int, iterations: int = 1, *, prime_bits: int = 512, sig_bits: int = 1024, tcp: bool = False,
                 rng=None, deployment=None) -> BenchReport:
    rng = rng or random.SystemRandom()
    client, verifier = deployment or make_deployment(prime_bits, sig_bits, rng=rng)
    template = np.array([rng.getrandbits(1) for _ in range(n)], dtype=np.uint8)
    client.enroll(LoopbackChannel(verifier), template, overwrite=True)

    server = None
    if tcp:
        server = VerifierServer(("127.0.0.1", 0), verifier)
        threading.Thread(target=server.serve_forever, daemon=True).start()
    up = down = 0
    user_s = verifier_s = 0.0
    ops = OpCounter()
    try:
        for _ in range(iterations):
            probe = template.copy()
            probe[rng.randrange(n)] ^= 1
            inner = TcpChannel(server.server_address) if tcp else LoopbackChannel(verifier)
            ch = _TimedChannel(inner)
            before = verifier.counter
            t0 = time.perf_counter()
            outcome = client.authenticate(ch, probe)
            elapsed = time.perf_counter() - t0
            ch.close()
            if not outcome.accepted:
                raise RuntimeError("bench authentication was rejected")
            after = verifier.counter
            vdelta = OpCounter(**{k: after.as_dict()[k] - before.as_dict()[k] for k in after.as_dict()})
            ops = ops + outcome.counter + vdelta
            up += ch.sent
            down += ch.received
            user_s += elapsed - ch.remote_seconds
            verifier_s += ch.remote_seconds
    finally:
        if server is not None:
            server.shutdown()
            server.server_close()
    it = iterations
    per_run = {k: v // it for k, v in ops.as_dict().items()}
    return BenchReport(biohash_len=n, modulus_bits=client.keys.pk.n.bit_length(),
                       bytes_user_to_verifier=up // it, bytes_verifier_to_user=down // it,
                       user_ms=1000 * user_s / it, verifier_ms=1000 * verifier_s / it, iterations=it,
                       op_counters=per_run, transport="tcp" if tcp else "loopback", cpu=cpu_model())


def run_bench(lengths=(112, 192, 256, 512, 2048), iterations: int = 1, *, prime_bits: int = 512,
              sig_bits: int = 1024, tcp: bool = False, rng=None) -> list:
    rng = rng or random.SystemRandom()
    deployment = make_deployment(prime_bits, sig_bits, rng=rng)
    return [bench_length(n, iterations, prime_bits=prime_bits, sig_bits=sig_bits, tcp=tcp, rng=rng,
                         deployment=deployment) for n in lengths]


def format_table(reports) -> str:
    head = (f"{'n':>5} {'Kbit':>9} {'ref':>6} {'dev':>7} {'link ms':>8} {'user ms':>9} {'verif ms':>9}"
            f" {'ref@3.2GHz u/v':>17} {'ops ok':>6}")
    lines = [head, "-" * len(head)]
    for r in reports:
        p32 = REFERENCE_MS_3_2GHZ.get(r.biohash_len)
        dev = r.kbits_deviation
        ok = not count_mismatches(r.biohash_len, OpCounter(**{k: r.op_counters[k] for k in OpCounter().as_dict()}))
        lines.append(f"{r.biohash_len:>5} {r.total_kbits:>9.1f} {r.ref_kbits or '-':>6} "
                     f"{'-' if dev is None else f'{100 * dev:+.2f}%':>7} {r.link_ms:>8.1f} {r.user_ms:>9.1f} "
                     f"{r.verifier_ms:>9.1f} {(f'{p32[0]}/{p32[1]}' if p32 else '-'):>17} {'yes' if ok else 'NO':>6}")
    if reports:
        lines.append(f"modulus {reports[0].modulus_bits} bits, transport {reports[0].transport}, cpu: {reports[0].cpu}")
    return "\n".join(lines)


def write_csv(reports, path) -> None:
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
