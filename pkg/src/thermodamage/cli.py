"""Command line entry point: ``thermodamage run|sweep-eps|verify``.

Exit codes: 0 success, 1 certification failure (``run``/``sweep-eps`` with
``--strict``, or any failure found by ``verify``), 2 hard failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .assembly import set_num_threads
from .config import SimConfig, config_from_dict, parse_config
from .errors import StepFailure, ThermoDamageError
from .output import (load_trajectory, write_failure_dump, write_ledger_csv, write_run_directory,
                     write_sweep_report)
from .rescaling import SLOPE_KEYS, SWEEP_COLUMNS, sweep
from .thermomech import Scaling
from .timeloop import FLAG_COLUMNS, rebuild_ledger, run

log = logging.getLogger("thermodamage")

EXIT_OK, EXIT_FAIL, EXIT_HARD = 0, 1, 2


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("THERMODAMAGE_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _load(args) -> SimConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg


def _summary(ledger) -> str:
    fails = ledger.failures()
    if not fails:
        return "all certifications PASS"
    kinds = sorted({c for _, c in fails})
    return f"{len(fails)} certification FAIL(s): " + ", ".join(
        f"{c} (first at step {min(k for k, cc in fails if cc == c)})" for c in kinds)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.output or f"{Path(args.config).stem}_out")
    try:
        result = run(cfg)
    except StepFailure as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None and len(partial.trajectory.t):
            tr = partial.trajectory
            fallback = {"u": tr.u[-1], "z": tr.z[-1], "theta": tr.theta[-1]}
        else:
            fallback = None
        report = write_failure_dump(out, cfg.get_mesh(), exc, fallback)
        print(f"error: step failure: {exc} (report: {report})", file=sys.stderr)
        return EXIT_HARD
    write_run_directory(out, result)
    print(f"{len(result.ledger) - 1} steps in {result.wall_time:.2f} s -> {out}")
    print(_summary(result.ledger))
    if not result.passed and args.strict:
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = Path(args.output or f"{Path(args.config).stem}_sweep")
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = sweep(cfg, workers=_threads(args))
    except StepFailure as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None and partial.rows:
            _write_sweep(out, partial)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HARD
    _write_sweep(out, report)
    print(f"sweep over eps = {report.eps}: slopes " +
          ", ".join(f"{k} {v:.3f}" for k, v in report.slopes.items()))
    ok = all(r["passed"] for r in report.rows)
    if not ok and args.strict:
        return EXIT_FAIL
    return EXIT_OK


def _write_sweep(out: Path, report) -> None:
    for res, row in zip(report.results, report.rows):
        member = out / f"eps_{row['eps']:g}"
        write_run_directory(member, res, res.config.scaling, extra={"diagnostics": {
            k: v for k, v in row.items() if k not in ("ode_residual", "mu")}})
        with open(member / "diagnostics.csv", "w") as fh:
            fh.write("k,mu,ode_residual\n")
            mu = np.concatenate([[0.0], row["mu"]])
            for k, (m, r) in enumerate(zip(mu, row["ode_residual"])):
                fh.write(f"{k},{m:.17g},{r:.17g}\n")
    cols = list(SWEEP_COLUMNS) + [f"slope_{k}" for k in SLOPE_KEYS]
    rows = []
    for r in report.rows:
        rr = {c: r[c] for c in SWEEP_COLUMNS}
        rr["passed"] = "PASS" if r["passed"] else "FAIL"
        rr.update({f"slope_{k}": report.slopes.get(k, float("nan")) for k in SLOPE_KEYS})
        rows.append(rr)
    write_sweep_report(out / "sweep_report.csv", rows, cols)


def cmd_verify(args) -> int:
    run_dir = Path(args.run_dir)
    echo, mesh, traj, (eps, beta) = load_trajectory(run_dir / "trajectory.npz")
    cfg = config_from_dict(echo, base_dir=run_dir)
    cfg.mesh = mesh
    scaling = Scaling(eps, beta)
    problems = []
    if np.any(traj.z < 0) or np.any(traj.z > 1):
        problems.append("damage outside [0, 1]")
    if not (np.all(np.isfinite(traj.u)) and np.all(np.isfinite(traj.theta))):
        problems.append("non-finite state")
    ledger = rebuild_ledger(cfg, mesh, traj, scaling)
    write_ledger_csv(run_dir / "verify_ledger.csv", ledger)
    for k, c in ledger.failures():
        r = ledger.rows[k]
        detail = {"unidirectional": f"max z increase {r['z_increase']:.3e}",
                  "positive": f"theta margin {r['positivity_margin']:.3e}",
                  "mech_energy": f"residual {r['mech_residual']:.3e}",
                  "total_energy": f"residual {r['total_residual']:.3e}",
                  "semistable": f"residual {r['semistability']:.3e}"}[c]
        problems.append(f"step {k}: {c} FAIL ({detail})")
    for c in FLAG_COLUMNS:
        bad = [r["k"] for r in ledger.rows if r.get(c) is False]
        print(f"{c:15s} {'FAIL' if bad else 'PASS'}")
    for p in problems:
        print(p)
    return EXIT_FAIL if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thermodamage", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--strict", action="store_true", help="exit 1 when any certification fails")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: $THERMODAMAGE_THREADS or 1)")
        sp.add_argument("--output", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    r = sub.add_parser("run", help="run one simulation")
    r.add_argument("config")
    common(r)
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep-eps", help="run the rescaled eps sweep")
    s.add_argument("config")
    common(s)
    s.set_defaults(func=cmd_sweep)
    v = sub.add_parser("verify", help="re-check all certifications of a run directory")
    v.add_argument("run_dir")
    common(v)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_HARD
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_num_threads(_threads(args))
    try:
        return args.func(args)
    except (ThermoDamageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HARD


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
