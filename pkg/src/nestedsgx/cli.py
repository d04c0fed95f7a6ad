"""Command line entry point: ``nestedsgx {measure,run,verify,tamper}``.

Exit codes: 0 success, 1 failed assertion / rejected bundle / successful
attack / runtime abort, 2 malformed input or configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .attest import TAMPERS, NestedBundle, SnpReport, TrustAnchors, tamper_bundle, verify_bundle
from .errors import ParseError, SimError
from .image import offline_mrenclave
from .machine import MachineConfig, expected_launch_digest
from .manifest import load_manifest
from .programs import PROGRAMS, image_for
from .rng import Drbg
from .scenario import load_scenario, run_scenario

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _resolve_seed(scenario_seed, cli_seed, deterministic: bool):
    """CLI seed beats the scenario seed; ``--deterministic-crypto`` alone means seed 0."""
    if cli_seed is not None:
        return cli_seed
    if scenario_seed is not None:
        return scenario_seed
    return 0 if deterministic else None


def _read(path: str, what: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {what}: {exc.strerror}", source=path) from None


def cmd_measure(args: argparse.Namespace) -> int:
    if args.manifest in PROGRAMS and not Path(args.manifest).exists():
        image = image_for(args.manifest)
    else:
        image = load_manifest(args.manifest)
    config = MachineConfig(total_pages=args.total_pages, vmpl0_pages=args.vmpl0_pages,
                           monitor_pages=args.monitor_pages)
    print(f"mrenclave     {offline_mrenclave(image).hex()}")
    print(f"launch_digest {expected_launch_digest(config).hex()}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    seed = _resolve_seed(sc.config.seed, args.seed, args.deterministic_crypto)
    sc.config = dataclasses.replace(sc.config, seed=seed)
    out_dir = Path(args.out_dir) if args.out_dir else Path(Path(args.scenario).stem + ".out")
    outcome = run_scenario(sc, out_dir,
                           ledger_out=Path(args.ledger_out) if args.ledger_out else None,
                           bundle_out=Path(args.bundle_out) if args.bundle_out else None)
    rep = outcome.report
    for a in rep["assertions"]:
        print(f"{'ok  ' if a['ok'] else 'FAIL'} {a['check']}" + (f": {a['detail']}" if not a["ok"] else ""))
    for a in rep["attacks"]:
        print(f"attack {a['attack']}: {a['verdict']}")
    if "abort" in rep:
        ab = rep["abort"]
        print(f"aborted: {ab['error']}: {ab['message']}", file=sys.stderr)
        print(f"  last events: {', '.join(ab['ledger_tail'])}", file=sys.stderr)
    for problem in rep["invariant_violations"]:
        print(f"invariant violated: {problem}", file=sys.stderr)
    print(f"{rep['status']}: report written to {outcome.files['report']}")
    return EXIT_OK if outcome.ok else EXIT_FAIL


def cmd_verify(args: argparse.Namespace) -> int:
    bundle = NestedBundle.from_json(_read(args.bundle, "bundle"))
    anchors_path = args.anchors or str(Path(args.bundle).with_name(Path(args.bundle).stem + ".anchors.json"))
    anchors = TrustAnchors.from_json(_read(anchors_path, "trust anchors"))
    verdict = verify_bundle(bundle, anchors)
    print(verdict)
    return EXIT_OK if verdict.accepted else EXIT_FAIL


def cmd_tamper(args: argparse.Namespace) -> int:
    if args.transform == "set-vmpl" and not args.guest_report:
        raise ParseError("set-vmpl needs --guest-report", field="--guest-report")
    bundle = NestedBundle.from_json(_read(args.bundle, "bundle"))
    guest_report = SnpReport.from_json(_read(args.guest_report, "guest report")) if args.guest_report else None
    seed = _resolve_seed(None, args.seed, args.deterministic_crypto)
    out = tamper_bundle(bundle, args.transform, rng=Drbg(seed).child("tamper"), guest_report=guest_report)
    text = out.to_json()
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
        print(f"{args.transform}: wrote {args.output} (expect Reject({TAMPERS[args.transform][1]}))")
    return EXIT_OK


def _seed(text: str) -> int | str:
    try:
        return int(text, 0)
    except ValueError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestedsgx", description="Deterministic nested-enclave simulator")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("measure", help="print the offline MRENCLAVE and the expected launch digest")
    m.add_argument("manifest", help="manifest YAML, or the name of a builtin program")
    m.add_argument("--total-pages", type=int, default=2048)
    m.add_argument("--vmpl0-pages", type=int, default=1088)
    m.add_argument("--monitor-pages", type=int, default=64)
    m.set_defaults(func=cmd_measure)

    r = sub.add_parser("run", help="run a scenario and write report, ledger and bundles")
    r.add_argument("scenario")
    r.add_argument("-o", "--out-dir", help="output directory (default: <scenario>.out)")
    r.add_argument("--seed", type=_seed, help="override the scenario seed")
    r.add_argument("--deterministic-crypto", action="store_true",
                   help="derive every key from the seed (seed 0 when none is given)")
    r.add_argument("--ledger-out", help="write the switch ledger here instead of the output directory")
    r.add_argument("--bundle-out", help="write the first attestation bundle here")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="verify an attestation bundle against trust anchors")
    v.add_argument("bundle")
    v.add_argument("--anchors", help="trust anchors JSON (default: <bundle>.anchors.json)")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("tamper", help="apply a named corruption to a bundle")
    t.add_argument("bundle")
    t.add_argument("--transform", required=True, choices=sorted(TAMPERS))
    t.add_argument("--guest-report", help="guest-issued SNP report JSON (needed by set-vmpl)")
    t.add_argument("--seed", type=_seed)
    t.add_argument("--deterministic-crypto", action="store_true")
    t.add_argument("-o", "--output", default="-")
    t.set_defaults(func=cmd_tamper)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
