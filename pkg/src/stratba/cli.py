"""Command-line front end: solve, profile, and synth subcommands."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .bal_io import BalParseError
from .evaluation import performance_profile, read_trace_csv, write_profile_csv
from .pipeline import RunSpec, run_problem
from .solvers import NumericFailureError
from .synth import make_ring_problem

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratba",
                                     description="Stratified bundle adjustment from random starts")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run the solver pipeline on BAL files")
    stage = solve.add_mutually_exclusive_group()
    stage.add_argument("--stage1", dest="stage", action="store_const", const="stage1",
                       help="first stage only")
    stage.add_argument("--stage2", dest="stage", action="store_const", const="stage2",
                       help="projective refinement only (from the lifted random start)")
    stage.add_argument("--full", dest="stage", action="store_const", const="full",
                       help="first stage then refinement (default)")
    stage.add_argument("--metric", dest="stage", action="store_const", const="metric",
                       help="full pipeline plus metric upgrade")
    solve.set_defaults(stage="full")
    solve.add_argument("--solver", default="povar",
                       help="stage-1 solver: povar | poba | iterative | direct")
    solve.add_argument("--stage2-solver", default="ripoba",
                       help="stage-2 solver: ripoba | ripcg")
    solve.add_argument("--seed", type=int, default=0)
    solve.add_argument("--eta", type=float, default=0.1)
    solve.add_argument("--lambda0", type=float, default=1e-4)
    solve.add_argument("--max-iterations", type=int, default=50)
    solve.add_argument("--ftol", type=float, default=1e-6)
    solve.add_argument("--power-order", type=int, default=20)
    solve.add_argument("--power-threshold", type=float, default=0.01)
    solve.add_argument("--inner-iterations", type=int, default=500)
    solve.add_argument("--out-dir", default=None,
                       help="artifact directory (default: $STRATBA_OUT_DIR or .)")
    solve.add_argument("--jobs", type=int, default=1,
                       help="worker threads across independent input files")
    solve.add_argument("inputs", nargs="+", help="BAL problem files (plain, .gz, or .bz2)")

    profile = sub.add_parser("profile", help="performance profiles from trace CSVs")
    profile.add_argument("--tau", type=float, action="append",
                         help="accuracy tolerance; repeatable (default 0.01)")
    profile.add_argument("--stage", default="stage1",
                         help="trace stage to profile: stage1 | stage2 | full")
    profile.add_argument("--out", default=None, help="output CSV (default: profile.csv)")
    profile.add_argument("traces", nargs="+", help="trace CSV files")

    synth = sub.add_parser("synth", help="write a synthetic BAL problem with ground truth")
    synth.add_argument("--cameras", type=int, required=True)
    synth.add_argument("--landmarks", type=int, required=True)
    synth.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("-o", "--output", required=True, help="output BAL file")
    return parser


def _cmd_solve(args) -> int:
    out_dir = args.out_dir or os.environ.get("STRATBA_OUT_DIR", ".")
    spec = RunSpec(
        inputs=args.inputs,
        seed=args.seed,
        stage=args.stage,
        stage1_solver=args.solver,
        stage2_solver=args.stage2_solver,
        eta=args.eta,
        initial_lambda=args.lambda0,
        max_iterations=args.max_iterations,
        function_tolerance=args.ftol,
        power_order=args.power_order,
        power_threshold=args.power_threshold,
        inner_iterations=args.inner_iterations,
        out_dir=out_dir,
    )
    try:
        spec.validate()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def run_one(path: str) -> int:
        try:
            summary = run_problem(path, spec)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except BalParseError as exc:
            print(f"parse error in {path}: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except NumericFailureError as exc:
            print(f"numeric failure on {path}: {exc} (partial artifacts kept)", file=sys.stderr)
            return EXIT_NUMERIC
        for name, info in summary["stages"].items():
            if "final_cost" in info:
                print(f"{path}: {name} [{info['solver']}] final cost "
                      f"{info['final_cost']:.6e} in {info['iterations']} iterations")
            else:
                print(f"{path}: {name} done")
        return EXIT_OK

    if args.jobs > 1 and len(spec.inputs) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(run_one, spec.inputs))
    else:
        codes = [run_one(p) for p in spec.inputs]
    return max(codes)


def _cmd_profile(args) -> int:
    taus = args.tau or [0.01]
    try:
        traces = []
        for path in args.traces:
            traces.extend(read_trace_csv(path))
    except (OSError, ValueError) as exc:
        print(f"cannot read traces: {exc}", file=sys.stderr)
        return EXIT_PARSE
    selected = [t for t in traces if t.stage == args.stage]
    if not selected:
        print(f"no traces for stage {args.stage!r}", file=sys.stderr)
        return EXIT_CONFIG
    profiles = []
    for tau in taus:
        profiles.extend(performance_profile(selected, tau).values())
    out = args.out or "profile.csv"
    write_profile_csv(profiles, out)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .bal_io import write_bal

    try:
        problem = make_ring_problem(args.cameras, args.landmarks, args.noise, args.seed)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        write_bal(problem, fh)
    print(f"wrote {out} ({problem.num_cameras} cameras, {problem.num_landmarks} landmarks, "
          f"{problem.num_observations} observations)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "solve":
        return _cmd_solve(args)
    if args.command == "profile":
        return _cmd_profile(args)
    return _cmd_synth(args)


if __name__ == "__main__":
    sys.exit(main())
