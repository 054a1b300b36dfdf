"""Command line entry point.

    gracybus run SCENARIO [--seed N] [--suite toy|classic] [--format table|json-lines] [--max-steps N]
    gracybus tables [--format ...]
    gracybus vectors
    gracybus gen-ca OUTDIR --devices A B C

Exit codes: 0 success, 2 convergence failure, 3 parse error, 4 livelock.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, metrics, wire
from .crypto import entropy, fnv1a64, make_provider
from .errors import BadScript, ParseError, StepLimitExceeded, UnknownDevice
from .network import Network, NetworkConfig
from .pki import Certificate, CertificateAuthority, enroll
from .scenario import parse_suite, run_scenario

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_PARSE = 3
EXIT_LIVELOCK = 4


def _suite_arg(value: str) -> int:
    try:
        return parse_suite(value)
    except ParseError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_run(args) -> int:
    try:
        report = run_scenario(args.scenario, seed=args.seed, suite=args.suite, max_steps=args.max_steps)
    except (ParseError, UnknownDevice, BadScript) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except StepLimitExceeded as exc:
        print(f"livelock: {exc}", file=sys.stderr)
        return EXIT_LIVELOCK
    sys.stdout.write(metrics.emit_metrics(report, args.format))
    if args.log:
        Path(args.log).write_text("\n".join(report.delivery_log) + "\n")
    return EXIT_OK if report.converged else EXIT_DIVERGED


def cmd_tables(args) -> int:
    sizes = analysis.size_table(seed=args.seed, suite=args.suite)
    failed = analysis.join_failed_sizes(seed=args.seed, suite=args.suite)
    storage = analysis.storage_table(seed=args.seed, suite=args.suite)
    conf = analysis.conformance(seed=args.seed, suite=args.suite)
    if args.format == "json-lines":
        out = [
            {"kind": "sizes", "by_n": {str(n): row for n, row in sizes.items()}, "join_failed": failed},
            {"kind": "storage", "by_n": {str(n): sorted(s) for n, s in storage.items()}},
            {
                "kind": "costs",
                "by_h": {
                    str(h): {row: {p: c.nonzero() for p, c in phases.items()} for row, phases in rows.items()}
                    for h, rows in conf.measured.items()
                },
            },
            {"kind": "conformance", "ok": conf.ok, "deviations": [d.__dict__ for d in conf.deviations]},
        ]
        sys.stdout.write("".join(json.dumps(o, sort_keys=True) + "\n" for o in out))
    else:
        print("message sizes (bytes)")
        print(metrics.size_table_text(sizes, failed))
        print("\nstorage per member")
        print(metrics.storage_table_text(storage))
        print("\noperation counts vs cost model")
        print(metrics.cost_table_text(conf))
    return EXIT_OK


def known_answers() -> list[tuple[str, str]]:
    """Deterministic ToySuite values and encodings."""
    toy = make_provider(0)
    out = [(f"fnv1a64:{m!r}", fnv1a64(m).hex()) for m in (b"", b"a", b"foobar")]
    out.append(("hash:abc", toy.hash(b"abc").hex()))
    out.append(("kdf:secret|context", toy.kdf(b"secret", b"context").hex()))
    out.append(("mac:key00000|data", toy.mac_compute(b"key00000", b"data").hex()))
    pair = toy.keypair_from_seed(b"seed")
    out.append(("keypair_from_seed:seed", pair.private.hex() + ":" + pair.public.hex()))
    out.append(("sign:seed-key|msg", toy.sign(pair.private, b"msg").hex()))
    net = Network(NetworkConfig(seed=0, suite=0))
    net.create_group("A")
    net.join("B")
    net.update("A")
    net.leave("B")
    for seq, ev in sorted(net.bus.history.items()):
        out.append((f"bus:{seq}:{wire.MsgType(ev.payload[3]).name}", ev.payload.hex()))
    return out


def cmd_vectors(args) -> int:
    for name, value in known_answers():
        print(f"{name} {value}")
    return EXIT_OK


def save_certificate(path: Path, cert: Certificate) -> None:
    w = wire.Writer()
    wire.write_certificate(w, cert)
    path.write_bytes(bytes(w.buf))


def load_certificate(path: Path) -> Certificate:
    r = wire.Reader(Path(path).read_bytes())
    cert = wire.read_certificate(r)
    r.done()
    return cert


def cmd_gen_ca(args) -> int:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    crypto = make_provider(args.suite)
    ca = CertificateAuthority.create(crypto, args.name, entropy(args.seed, "ca"))
    (out / "ca.anchor").write_text(f"{ca.name}\n{ca.keys.public.hex()}\n")
    (out / "ca.key").write_text(ca.keys.private.hex() + "\n")
    for dev in args.devices:
        cred = enroll(crypto, ca, dev, entropy(args.seed, "cert", dev))
        save_certificate(out / f"{dev}.cert", cred.certificate)
        (out / f"{dev}.key").write_text(cred.keys.private.hex() + "\n")
    print(f"wrote CA {ca.name!r} and {len(args.devices)} device certificates to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gracybus", description="group key agreement simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--suite", type=_suite_arg, default=None, help="toy, classic or a numeric id")
    run.add_argument("--format", choices=metrics.FORMATS, default="table")
    run.add_argument("--max-steps", type=int, default=10_000)
    run.add_argument("--log", help="also write the delivery log here")
    run.set_defaults(func=cmd_run)

    tab = sub.add_parser("tables", help="measure message sizes, storage and operation counts")
    tab.add_argument("--seed", type=int, default=0)
    tab.add_argument("--suite", type=_suite_arg, default=0)
    tab.add_argument("--format", choices=metrics.FORMATS, default="table")
    tab.set_defaults(func=cmd_tables)

    vec = sub.add_parser("vectors", help="print ToySuite known-answer values")
    vec.set_defaults(func=cmd_vectors)

    ca = sub.add_parser("gen-ca", help="write a CA and device certificates")
    ca.add_argument("outdir")
    ca.add_argument("--devices", nargs="+", required=True)
    ca.add_argument("--name", default="gracybus-ca")
    ca.add_argument("--seed", type=int, default=0)
    ca.add_argument("--suite", type=_suite_arg, default=0)
    ca.set_defaults(func=cmd_gen_ca)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
