"""``qkdn`` command line: run scenarios, validate configs, audit traces."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigInvalid, load_config, reference_config
from .harness import Scenario, requirements_trace, run_scenario, trace_check


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config) if args.config else reference_config()
    except ConfigInvalid as exc:
        for line in exc.diagnostics:
            print(line, file=sys.stderr)
        return 2
    overrides = {"aaa": {"mode": args.aaa}} if args.aaa else None
    run = run_scenario(cfg, args.scenario, seed=args.seed, exchanges=args.exchanges,
                       backend=args.backend, out_dir=args.out, overrides=overrides)
    rep = run.report
    print(f"{rep.scenario}: {rep.succeeded}/{rep.exchanges} exchanges succeeded")
    if rep.failures:
        print("failures: " + ", ".join(f"{k}={v}" for k, v in rep.failures.items()))
    if rep.t_key_mean is not None:
        print(f"t_key mean {rep.t_key_mean:.6f} s, std {rep.t_key_std:.6f} s")
    for phase in rep.phases:
        print(f"phase {phase['phase']}: {phase['succeeded']}/{phase['exchanges']}")
    print(f"reports written to {args.out}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigInvalid as exc:
        for line in exc.diagnostics:
            print(line)
        return 1
    print(f"{args.config}: ok ({len(cfg['nodes'])} nodes, {len(cfg['links'])} links)")
    return 0


def _cmd_trace_check(args: argparse.Namespace) -> int:
    results = trace_check(args.dir)
    bad = 0
    for name, violations in results.items():
        print(f"{name}: {'ok' if not violations else f'{len(violations)} violations'}")
        for v in violations[:10]:
            print(f"  {v}")
        bad += len(violations)
    return 1 if bad else 0


def _cmd_requirements(args: argparse.Namespace) -> int:
    report = requirements_trace(args.root)
    print(json.dumps(report, indent=1))
    return 1 if any(v["status"] == "UNMAPPED_REQUIREMENT" for v in report.values()) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write reports")
    run.add_argument("--config", type=Path, help="topology config (default: reference topology)")
    run.add_argument("--scenario", choices=[s.value for s in Scenario], default="BASELINE")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--backend", choices=["sim", "socket"], default="sim")
    run.add_argument("--exchanges", type=int, default=None)
    run.add_argument("--aaa", choices=["strict", "permissive"], default=None)
    run.add_argument("--out", type=Path, default=Path("out"))
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="validate a topology config")
    val.add_argument("--config", type=Path, required=True)
    val.set_defaults(func=_cmd_validate)

    tc = sub.add_parser("trace-check", help="run policy and flow audits over a trace directory")
    tc.add_argument("dir", type=Path)
    tc.set_defaults(func=_cmd_trace_check)

    req = sub.add_parser("requirements", help="print the requirements traceability matrix")
    req.add_argument("--root", type=Path, default=None)
    req.set_defaults(func=_cmd_requirements)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
