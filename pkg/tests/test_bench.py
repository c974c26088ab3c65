import random

import pytest

from thrive import bench
from thrive.protocol import OpCounter


@pytest.fixture(scope="module")
def deployment():
    return bench.make_deployment(128, 512, rng=random.Random(1))


def test_expected_counts():
    assert bench.expected_counts(256) == dict(encryptions=256, share_exps=768, sig_generations=1,
                                              sig_verifications=2, jacobi_checks=256, mod_mults=514)


def test_count_mismatches():
    good = OpCounter(**bench.expected_counts(4))
    assert bench.count_mismatches(4, good) == {}
    good.share_exps += 1
    assert bench.count_mismatches(4, good) == {"share_exps": (13, 12)}


def test_report_fields(deployment):
    rep = bench.bench_length(16, 2, rng=random.Random(2), deployment=deployment)
    assert rep.iterations == 2 and rep.transport == "loopback"
    assert bench.count_mismatches(16, OpCounter(**{k: rep.op_counters[k] for k in OpCounter().as_dict()})) == {}
    assert rep.total_ms >= max(rep.user_ms, rep.verifier_ms) > 0
    assert rep.total_bits == 8 * (rep.bytes_user_to_verifier + rep.bytes_verifier_to_user)
    assert rep.kbits_deviation is None and rep.ref_kbits is None
    row = rep.row()
    assert row["ops_share_exps"] == 48 and row["ref_user_ms_3_2ghz"] is None


def test_report_over_tcp(deployment):
    rep = bench.bench_length(8, 1, rng=random.Random(3), deployment=deployment, tcp=True)
    loop = bench.bench_length(8, 1, rng=random.Random(3), deployment=deployment)
    assert rep.transport == "tcp"
    # the same messages cross the wire either way, up to a few bytes of integer width
    assert abs(rep.total_bits - loop.total_bits) < 64


def test_bandwidth_grows_linearly(deployment):
    a = bench.bench_length(32, rng=random.Random(4), deployment=deployment)
    b = bench.bench_length(64, rng=random.Random(4), deployment=deployment)
    c = bench.bench_length(96, rng=random.Random(4), deployment=deployment)
    step1, step2 = b.total_bits - a.total_bits, c.total_bits - b.total_bits
    modulus = deployment[0].keys.pk.n.bit_length()
    # three modulus-sized integers per template bit, one bit of R
    assert abs(step1 - 32 * (3 * modulus + 1)) <= 32 * 24
    assert abs(step1 - step2) <= 64


def test_reference_deviation_property():
    rep = bench.BenchReport(256, 1024, 50_000, 48_875, 1.0, 2.0, 1)
    assert rep.total_kbits == 791.0 and rep.kbits_deviation == 0.0
    assert rep.link_ms == pytest.approx(79.1)


def test_table_and_csv(deployment, tmp_path):
    reps = [bench.bench_length(n, rng=random.Random(5), deployment=deployment) for n in (8, 112)]
    text = bench.format_table(reps)
    assert "113/337" in text and "cpu:" in text
    bench.write_csv(reps, tmp_path / "b.csv")
    head = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert "total_kbits" in head and "ref_verifier_ms_3_2ghz" in head


def test_cpu_model():
    assert isinstance(bench.cpu_model(), str)
