"""Command-line front end.

Exit codes: 0 all verdicts pass, 1 a verdict failed, 2 usage or parse error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .assembly import AssemblyError, SolveError
from .deform import DeformationError
from .eigen import EigenError
from .mesh import MeshError
from .metric import MetricError
from .prescribe import PrescriptionError
from .scenario import DEFAULT_SEED, FAMILY, RunReport, Scenario, ScenarioError, load_scenario, run_scenario

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
NUMERICAL_ERRORS = (DeformationError, PrescriptionError, EigenError, SolveError, AssemblyError, MetricError,
                    MeshError, ArithmeticError, np.linalg.LinAlgError)
REPORT_NAME = "report.txt"


def _module_of(exc: Exception) -> str:
    return type(exc).__module__.rsplit(".", 1)[-1]


def write_report(rep: RunReport, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / REPORT_NAME
    io.write_records(path, rep.lines())
    for name, rows in rep.tables.items():
        if rows:
            io.write_csv(out / f"{name}.csv", rows)
    return path


def _summary(rep: RunReport, stream=None) -> None:
    stream = stream or sys.stdout
    for name, ok in rep.verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}", file=stream)
    print(f"{'PASS' if rep.passed else 'FAIL'} overall ({len(rep.verdicts)} verdicts)", file=stream)


def _load(args) -> Scenario:
    s = load_scenario(args.scenario)
    if args.seed is not None:
        s.seed = args.seed
    if args.tol is not None:
        if not args.tol > 0:
            raise ScenarioError("--tol must be positive")
        s.tol = args.tol
    return s


def cmd_run(args) -> int:
    s = _load(args)
    allowed = FAMILY.get(args.command)
    if allowed and s.pipeline not in allowed:
        raise ScenarioError(f"scenario.pipeline {s.pipeline!r} does not belong to the {args.command!r} command")
    rep = run_scenario(s)
    path = write_report(rep, Path(args.out))
    _summary(rep)
    print(f"report: {path}")
    return EXIT_PASS if rep.passed else EXIT_FAIL


def _numeric_fields(lines):
    out = []
    for rec in lines:
        if rec.get("kind") == "timing":
            continue
        out.append({k: v for k, v in rec.items() if k != "seconds"})
    return out


def _same_record(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k, v in a.items():
        w = b[k]
        both_nan = isinstance(v, float) and isinstance(w, float) and math.isnan(v) and math.isnan(w)
        if v != w and not both_nan:
            return False
    return True


def cmd_verify(args) -> int:
    """Re-run a scenario and compare with the stored report field by field."""
    s = _load(args)
    stored_path = Path(args.out) / REPORT_NAME
    if not stored_path.exists():
        raise ScenarioError(f"no stored report at {stored_path}")
    stored = _numeric_fields(io.read_records(stored_path))
    rep = run_scenario(s)
    fresh = _numeric_fields([io.parse_record(io.format_record(r)) for r in rep.lines()])
    same = len(stored) == len(fresh) and all(_same_record(a, b) for a, b in zip(stored, fresh))
    print(f"{'PASS' if same else 'FAIL'} reproduced")
    _summary(rep)
    return EXIT_PASS if same and rep.passed else EXIT_FAIL


def _sweep_point(payload):
    s, key, value = payload
    point = s.with_value(key, value)
    try:
        return value, run_scenario(point), None
    except NUMERICAL_ERRORS as exc:
        return value, None, f"{_module_of(exc)}: {exc}"


def _lookup(rep: RunReport, metric: str):
    for rec in reversed(rep.records):
        if metric in rec:
            return rec[metric]
    return float("nan")


def cmd_sweep(args) -> int:
    s = _load(args)
    key = s.sweep.get("key")
    values = [v.strip() for v in s.sweep.get("values", "").split("|") if v.strip()]
    metric = s.sweep.get("metric")
    if not key or not metric:
        raise ScenarioError("sweep: fields sweep.key and sweep.metric are required")
    if not values:
        raise ScenarioError("sweep: empty parameter grid (sweep.values)")
    for v in values:
        s.with_value(key, v)  # validate every grid point before running any
    out = Path(args.out)
    payloads = [(s, key, v) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]
    rows, all_pass = [], True
    for i, (value, rep, err) in enumerate(results):
        row = {"index": i, key: value, metric: float("nan"), "pass": False, "error": err or ""}
        if rep is not None:
            write_report(rep, out / f"point{i:03d}")
            row[metric] = _lookup(rep, metric)
            row["pass"] = rep.passed
        all_pass &= row["pass"]
        rows.append(row)
    if s.sweep.get("order", "false").lower() in ("true", "yes", "1"):
        # Richardson: successive differences shrink by ratio^order
        ratio = float(s.sweep.get("ratio", "2"))
        vals = [float(r[metric]) for r in rows]
        for k, r in enumerate(rows):
            r["order"] = float("nan")
            if k >= 2:
                a, b = abs(vals[k - 1] - vals[k - 2]), abs(vals[k] - vals[k - 1])
                if a > 0 and b > 0:
                    r["order"] = math.log(a / b) / math.log(ratio)
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "sweep.csv", rows)
    for r in rows:
        print(" ".join(f"{k}={r[k]}" for k in r))
    return EXIT_PASS if all_pass else EXIT_FAIL


def cmd_report(args) -> int:
    """Summarise a stored report directory."""
    path = Path(args.out) / REPORT_NAME
    if not path.exists():
        raise ScenarioError(f"no stored report at {path}")
    recs = io.read_records(path)
    verdicts = [r for r in recs if r.get("kind") == "verdict"]
    if not verdicts:
        raise ScenarioError(f"{path}: report has no verdicts")
    for r in verdicts:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['name']}")
    ok = all(r["pass"] for r in verdicts)
    print(f"{'PASS' if ok else 'FAIL'} overall ({len(verdicts)} verdicts)")
    return EXIT_PASS if ok else EXIT_FAIL


COMMANDS = {
    "eigen": cmd_run,
    "deform": cmd_run,
    "prescribe": cmd_run,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="confdeform", description="Conformal deformation experiments")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--scenario", help="scenario file (INI format)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    ap.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    ap.add_argument("--tol", type=float, default=None, help="solver tolerance override")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    if args.command != "report" and not args.scenario:
        print("error: --scenario is required", file=sys.stderr)
        return EXIT_USAGE
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure in {_module_of(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
