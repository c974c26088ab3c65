"""Command line: dealer setup, client enroll/authenticate, verifier daemon, bench."""
from __future__ import annotations

import argparse
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from . import biohash as bh
from . import threshold_gm as gm
from .bench import format_table, run_bench, write_csv
from .protocol import DecisionError, ProtocolError, UserClient
from .service import TcpChannel, Verifier, serve
from .signatures import sig_keygen
from .storage import (EnrollmentStore, KeyFileError, ServerConfig, VerifierKeyStore, load_user_material,
                      load_verifier_signing_key, write_dealer_output)

EXIT_OK, EXIT_REJECT, EXIT_PROTOCOL, EXIT_NETWORK, EXIT_USAGE = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_dealer_setup(args) -> int:
    rng = secrets.SystemRandom()
    if args.toy_primes:
        p, q = _ints(args.toy_primes)
        s = _ints(args.toy_shares)
        if len(s) != 4:
            raise SystemExit("--toy-shares needs four values p1,q1,p2,q2")
        pk, s1, s2 = gm.dealer_keygen(primes=(p, q), shares=((s[0], s[1]), (s[2], s[3])))
    else:
        pk, s1, s2 = gm.dealer_keygen(rng=rng, security_bits=args.security)
    out = Path(args.out)
    vkey = out / "verifier" / "signing.key"
    small = args.sig_bits < 1024
    if vkey.exists():
        verifier_sig = load_verifier_signing_key(out / "verifier")
    else:
        verifier_sig = sig_keygen("verifier", args.sig_bits, rng, allow_small=small)
    user_sig = sig_keygen(args.user, args.sig_bits, rng, allow_small=small)
    write_dealer_output(out, args.user, pk, s1, s2, user_sig, verifier_sig, secrets.token_bytes(32))
    print(f"dealer: wrote keys for {args.user!r} under {out} (N is {pk.n.bit_length()} bits)")
    return EXIT_OK


def _template(args, keys_root, user_id):
    keys, bkey = load_user_material(keys_root, user_id)
    model = bh.PcaModel.load(args.pca)
    x = bh.read_features(args.features)[0]
    return keys, bh.biohash(model, bkey, x, args.biohash_len)


def cmd_biohash(args) -> int:
    _, bits = _template(args, args.keys, args.user)
    print("".join(str(int(b)) for b in bits))
    return EXIT_OK


def cmd_pca_train(args) -> int:
    samples = bh.read_features(args.features)
    model = bh.pca_train(samples, args.k)
    model.save(args.out)
    print(f"pca: {model.k} components over {model.dim} dimensions -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    data = bh.synthetic_users(args.users, args.samples, args.dim, args.noise, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bh.write_features(out / "training.csv", data.reshape(-1, args.dim))
    for i in range(args.users):
        bh.write_features(out / f"user{i}.csv", data[i])
    print(f"synth: {args.users} users x {args.samples} samples of dimension {args.dim} -> {out}")
    return EXIT_OK


def cmd_enroll(args) -> int:
    keys, bits = _template(args, args.keys, args.user)
    with TcpChannel(args.connect) as ch:
        UserClient(keys).enroll(ch, bits, overwrite=args.overwrite)
    print(f"enrolled {args.user!r} ({bits.size}-bit template)")
    return EXIT_OK


def cmd_authenticate(args) -> int:
    keys, bits = _template(args, args.keys, args.user)
    with TcpChannel(args.connect) as ch:
        outcome = UserClient(keys).authenticate(ch, bits)
    d = outcome.decision
    print(f"decision: {d.verdict.upper()}{f' ({d.reason})' if d.reason else ''} "
          f"session={d.nonce_user.session_id.hex()} signature=verified")
    return EXIT_OK if outcome.accepted else EXIT_REJECT


def cmd_serve(args) -> int:
    cfg = ServerConfig.load(args.config) if args.config else ServerConfig()
    for name in ("listen", "db_root", "key_root", "biohash_len", "mu", "skew_secs", "max_sessions"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    keys = VerifierKeyStore(cfg.key_root)
    verifier = Verifier(keys, EnrollmentStore(cfg.db_root, keys), load_verifier_signing_key(cfg.key_root),
                        biohash_len=cfg.biohash_len, mu=cfg.threshold, skew=cfg.skew_secs,
                        max_sessions=cfg.max_sessions)
    serve(cfg.listen, verifier)
    return EXIT_OK


def cmd_bench(args) -> int:
    lengths = _ints(args.biohash_len) if args.biohash_len else list(bh.TABLE_LENGTHS)
    prime_bits = gm.SECURITY_PRIME_BITS[args.security]
    reports = run_bench(lengths, args.iterations, prime_bits=prime_bits, tcp=args.tcp)
    print(format_table(reports))
    if args.csv_out:
        write_csv(reports, args.csv_out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thrive", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dealer-setup", help="generate and distribute keys for one user")
    d.add_argument("--out", required=True)
    d.add_argument("--user", required=True)
    d.add_argument("--security", type=int, default=80, choices=sorted(gm.SECURITY_PRIME_BITS))
    d.add_argument("--sig-bits", type=int, default=1024)
    d.add_argument("--toy-primes", help="P,Q: fixed Blum primes, for worked examples only")
    d.add_argument("--toy-shares", default="4,4,4,4", help="p1,q1,p2,q2 used with --toy-primes")
    d.set_defaults(func=cmd_dealer_setup)

    def client_args(sp, network=True):
        sp.add_argument("--features", required=True, help="feature CSV; the first vector is used")
        sp.add_argument("--pca", required=True, help="PCA model from pca-train")
        sp.add_argument("--keys", required=True, help="dealer output directory")
        sp.add_argument("--user", required=True)
        sp.add_argument("--biohash-len", type=int, default=bh.DEFAULT_LENGTH)
        if network:
            sp.add_argument("--connect", required=True, help="verifier host:port")

    e = sub.add_parser("enroll", help="send an encrypted, signed template to the verifier")
    client_args(e)
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_enroll)

    a = sub.add_parser("authenticate", help="run the four-round authentication")
    client_args(a)
    a.set_defaults(func=cmd_authenticate)

    b = sub.add_parser("biohash", help="print the template computed from features and key")
    client_args(b, network=False)
    b.set_defaults(func=cmd_biohash)

    t = sub.add_parser("pca-train", help="fit the PCA stage on a training feature CSV")
    t.add_argument("--features", required=True)
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_pca_train)

    y = sub.add_parser("synth", help="write synthetic Gaussian feature CSVs")
    y.add_argument("--out-dir", required=True)
    y.add_argument("--users", type=int, default=300)
    y.add_argument("--samples", type=int, default=3)
    y.add_argument("--dim", type=int, default=320)
    y.add_argument("--noise", type=float, default=0.05)
    y.add_argument("--seed", type=int)
    y.set_defaults(func=cmd_synth)

    s = sub.add_parser("serve", help="run the verifier daemon")
    s.add_argument("--config")
    s.add_argument("--listen")
    s.add_argument("--db-root", dest="db_root")
    s.add_argument("--keys", dest="key_root", help="verifier key directory (<dealer out>/verifier)")
    s.add_argument("--biohash-len", dest="biohash_len", type=int)
    s.add_argument("--mu", type=int)
    s.add_argument("--skew", dest="skew_secs", type=int)
    s.add_argument("--max-sessions", dest="max_sessions", type=int)
    s.set_defaults(func=cmd_serve)

    n = sub.add_parser("bench", help="measure bandwidth, op counts and timings")
    n.add_argument("--biohash-len", help="comma-separated lengths (default: 112,192,256,512,2048)")
    n.add_argument("--iterations", type=int, default=1)
    n.add_argument("--security", type=int, default=80, choices=sorted(gm.SECURITY_PRIME_BITS))
    n.add_argument("--tcp", action="store_true", help="measure over loopback TCP instead of in-process")
    n.add_argument("--csv-out")
    n.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except DecisionError as exc:
        print(f"error: decision verification failed: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        rejected = exc.code.name in ("DUPLICATE", "BAD_SIGNATURE", "INVALID_CIPHERTEXT", "REQUEST_REJECTED")
        return EXIT_REJECT if args.command == "enroll" and rejected else EXIT_PROTOCOL
    except (ConnectionError, TimeoutError, OSError) as exc:
        if isinstance(exc, (FileNotFoundError, PermissionError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"error: network: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (KeyFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
