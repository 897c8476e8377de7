"""Command line entry point: ``stokesdrift run | verify | report``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 admissibility failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import report as rep
from .scenario import AdmissibilityError, ConfigError, load_config
from .solver import SolverError, evolve, vector_potential_evolve

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ADMISSIBILITY = 0, 1, 2, 3

log = logging.getLogger("stokesdrift")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _split(text: str | None) -> list[str]:
    if not text:
        return []
    return [s.strip() for s in text.split(",") if s.strip()]


def _snapshots(arg: str | None):
    if arg is None or arg == "none":
        return None
    if arg == "all":
        return "all"
    try:
        return [float(s) for s in _split(arg)]
    except ValueError:
        raise ConfigError(f"--snapshots expects 'all', 'none' or comma-separated times, got {arg!r}")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.checks:
        cfg = replace(cfg, checks=tuple(_split(args.checks)))
    names = rep.resolve_checks(cfg.checks)
    snaps = _snapshots(args.snapshots)
    norms = rep.operator_norms(cfg.L, seed=cfg.seed)
    traj = evolve(cfg, snapshots=snaps, operator_norms=norms, pairing_identity="pairing_identity" in names)
    replay = None
    if snaps == "all":
        drift, forcing = cfg.build(traj.grid)
        _, replay = vector_potential_evolve(traj, drift, forcing)
    out = Path(args.out_dir)
    paths = rep.write_run(traj, out, rep.make_manifest(cfg, traj, norms), replay)
    if traj.flags.get("boundary_contaminated"):
        log.warning("boundary mass above 1e-3 first at t = %.4g", traj.flags["contamination_time"])
    print(f"run complete: {len(traj.times)} ledger rows in {traj.wall_time:.1f} s; ledger {paths['ledger']}")
    return EXIT_OK


def _run_dir(args) -> Path:
    path = Path(args.path or args.out_dir)
    return path.parent if path.is_file() else path


def cmd_verify(args) -> int:
    root = _run_dir(args)
    try:
        names = rep.resolve_checks(_split(args.checks) or ["all"])
    except rep.UnknownCheck as exc:
        print(f"unknown check: {exc.args[0]}; known: {', '.join(sorted(rep.CHECKS))}", file=sys.stderr)
        return EXIT_USAGE
    if not (root / rep.MANIFEST_FILE).exists():
        print(f"no run found in {root}", file=sys.stderr)
        return EXIT_USAGE
    run = rep.load_run(root)
    result = rep.verify(run, names)
    target = Path(args.report) if args.report else root / rep.REPORT_FILE
    result.write(target)
    print(rep.format_table(result))
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_report(args) -> int:
    path = Path(args.path) if args.path else Path(args.out_dir) / rep.REPORT_FILE
    if not path.exists():
        print(f"no report at {path}", file=sys.stderr)
        return EXIT_USAGE
    result = rep.VerificationReport.read(path)
    print(rep.format_table(result))
    root = path.parent
    if not args.no_plots and (root / rep.MANIFEST_FILE).exists():
        run = rep.load_run(root)
        table = rep.write_envelopes(run.trajectory, root / rep.ENVELOPES_FILE)
        for p in rep.plot_envelopes(table, root / "plots"):
            print(f"plot: {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stokesdrift", description="Drift-perturbed Stokes simulator and decay verification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="evolve a scenario and write its ledger")
    r.add_argument("--config", required=True)
    r.add_argument("--out-dir", default="run")
    r.add_argument("--snapshots", default=None, help="'all', 'none' or comma-separated times")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--checks", default=None, help="checks the run should support (comma-separated)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="check a run's ledger")
    v.add_argument("path", nargs="?", help="run directory or its ledger.csv")
    v.add_argument("--out-dir", default="run")
    v.add_argument("--checks", default="all")
    v.add_argument("--report", default=None, help="output path (default: report.jsonl in the run directory)")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("report", help="summarize a verification report")
    s.add_argument("path", nargs="?", help="report.jsonl")
    s.add_argument("--out-dir", default="run")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, rep.UnknownCheck) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdmissibilityError as exc:
        print(f"admissibility failure: {exc}", file=sys.stderr)
        return EXIT_ADMISSIBILITY
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
