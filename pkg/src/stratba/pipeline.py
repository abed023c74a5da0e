"""End-to-end orchestration: init, stages, artifact files, run summaries."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bal_io import ProjectiveState, load_bal, prune_underobserved, random_init
from .evaluation import ConvergenceTrace, TraceRecord, write_trace_csv
from .metric_upgrade import upgrade
from .objective import STAGE1, STAGE2, PoseConfig, total_cost
from .riemannian import lift_stage1_to_stage2
from .solvers import JOINT, VARPRO, NumericFailureError, SolverConfig, lm_minimize

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGE1_SOLVERS = {
    "povar": (VARPRO, "power"),
    "poba": (JOINT, "power"),
    "iterative": (VARPRO, "pcg"),
    "direct": (VARPRO, "direct"),
}
STAGE2_SOLVERS = {"ripoba": "power", "ripcg": "pcg"}
STAGES = ("stage1", "stage2", "full", "metric")


@dataclass
class RunSpec:
    """One solve invocation: inputs, stage selection, solver names, overrides."""

    inputs: list[str]
    seed: int = 0
    stage: str = "full"
    stage1_solver: str = "povar"
    stage2_solver: str = "ripoba"
    eta: float = 0.1
    initial_lambda: float = 1e-4
    max_iterations: int = 50
    function_tolerance: float = 1e-6
    power_order: int = 20
    power_threshold: float = 0.01
    inner_iterations: int = 500
    out_dir: str = "."

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.stage1_solver not in STAGE1_SOLVERS:
            raise ValueError(
                f"unknown stage-1 solver {self.stage1_solver!r}; choose from "
                f"{sorted(STAGE1_SOLVERS)}")
        if self.stage2_solver not in STAGE2_SOLVERS:
            raise ValueError(
                f"unknown stage-2 solver {self.stage2_solver!r}; choose from "
                f"{sorted(STAGE2_SOLVERS)}")
        # delegate range checks
        self.stage1_config()

    def stage1_config(self) -> SolverConfig:
        mode, inner = STAGE1_SOLVERS[self.stage1_solver]
        return SolverConfig(
            max_outer_iterations=self.max_iterations,
            function_tolerance=self.function_tolerance,
            initial_lambda=self.initial_lambda,
            max_power_order=self.power_order,
            power_threshold=self.power_threshold,
            max_inner_iterations=self.inner_iterations,
            inner_solver=inner,
            mode=mode,
            pose=PoseConfig(eta=self.eta),
        )

    def stage2_config(self) -> SolverConfig:
        inner = STAGE2_SOLVERS[self.stage2_solver]
        return SolverConfig(
            max_outer_iterations=self.max_iterations,
            function_tolerance=self.function_tolerance,
            initial_lambda=self.initial_lambda,
            max_power_order=self.power_order,
            power_threshold=self.power_threshold,
            max_inner_iterations=self.inner_iterations,
            inner_solver=inner,
            mode=JOINT,
            pose=PoseConfig(eta=self.eta),
        )

    def config_echo(self) -> dict:
        return {
            "seed": self.seed,
            "stage": self.stage,
            "stage1_solver": self.stage1_solver,
            "stage2_solver": self.stage2_solver,
            "eta": self.eta,
            "initial_lambda": self.initial_lambda,
            "max_iterations": self.max_iterations,
            "function_tolerance": self.function_tolerance,
            "power_order": self.power_order,
            "power_threshold": self.power_threshold,
            "inner_iterations": self.inner_iterations,
        }


def write_state(state: ProjectiveState, path: str | Path) -> None:
    """Plain-text state: one camera (12 numbers, row-major) or landmark (4) per line."""
    with open(path, "w") as fh:
        fh.write(f"cameras {len(state.cameras)}\n")
        for cam in state.cameras.reshape(-1, 12):
            fh.write(" ".join(format(v, ".17g") for v in cam) + "\n")
        fh.write(f"landmarks {len(state.landmarks)}\n")
        for lm in state.landmarks:
            fh.write(" ".join(format(v, ".17g") for v in lm) + "\n")


def read_state(path: str | Path) -> ProjectiveState:
    with open(path) as fh:
        tag, n_cam = fh.readline().split()
        assert tag == "cameras"
        cams = np.array([[float(v) for v in fh.readline().split()] for _ in range(int(n_cam))])
        tag, n_lm = fh.readline().split()
        assert tag == "landmarks"
        lms = np.array([[float(v) for v in fh.readline().split()] for _ in range(int(n_lm))])
    return ProjectiveState(cams.reshape(-1, 3, 4), lms)


def full_trace(pre_stage1_cost: float, stage1_runtime: float, stage2_trace: ConvergenceTrace
               ) -> ConvergenceTrace:
    """Second-stage trace in the cumulative convention: the initial cost is the
    projective cost of the random starting state and runtimes include stage 1."""
    records = [TraceRecord(0, pre_stage1_cost, 0.0)]
    for rec in stage2_trace.records:
        records.append(TraceRecord(rec.iteration + 1, rec.cost,
                                   rec.elapsed_seconds + stage1_runtime))
    return ConvergenceTrace(stage2_trace.solver_id, stage2_trace.problem_id, "full",
                            records, pre_stage1_cost)


def run_problem(path: str | Path, spec: RunSpec) -> dict:
    """Run the selected stages on one problem file; returns the summary dict.

    Artifacts land in the output directory named after the input stem:
    ``<stem>_trace.csv``, ``<stem>_state.txt``, ``<stem>_summary.json`` and,
    for the metric stage, ``<stem>_metric.txt``. On numeric failure the trace
    and summary collected so far are still written before the error surfaces.
    """
    path = Path(path)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = path.name.split(".")[0]
    problem_id = stem

    raw = load_bal(path)
    problem = prune_underobserved(raw)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "problem": str(path),
        "problem_id": problem_id,
        "num_cameras": problem.num_cameras,
        "num_landmarks": problem.num_landmarks,
        "num_observations": problem.num_observations,
        "pruned_landmarks": raw.num_landmarks - problem.num_landmarks,
        "config": spec.config_echo(),
        "stages": {},
    }
    traces: list[ConvergenceTrace] = []
    state = random_init(problem, spec.seed, PoseConfig(eta=spec.eta))
    failure: NumericFailureError | None = None

    try:
        run_stage1 = spec.stage in ("stage1", "full", "metric")
        run_stage2 = spec.stage in ("stage2", "full", "metric")
        run_metric = spec.stage == "metric"
        stage1_runtime = 0.0
        pre_cost_projective = None

        if run_stage2:
            try:
                pre_cost_projective = total_cost(lift_stage1_to_stage2(state), problem, STAGE2)
            except ValueError:
                pre_cost_projective = float("inf")

        if run_stage1:
            cfg = spec.stage1_config()
            t0 = time.perf_counter()
            state, trace = lm_minimize(problem, state, STAGE1, cfg, problem_id=problem_id)
            stage1_runtime = time.perf_counter() - t0
            traces.append(trace)
            summary["stages"]["stage1"] = {
                "solver": spec.stage1_solver,
                "initial_cost": trace.initial_cost,
                "final_cost": trace.records[-1].cost,
                "iterations": trace.records[-1].iteration,
                "runtime_seconds": stage1_runtime,
            }

        if run_stage2:
            try:
                state = lift_stage1_to_stage2(state)
            except ValueError as exc:
                raise NumericFailureError(f"cannot lift state to stage 2: {exc}") from exc
            cfg = spec.stage2_config()
            t0 = time.perf_counter()
            state, trace = lm_minimize(problem, state, STAGE2, cfg, problem_id=problem_id)
            stage2_runtime = time.perf_counter() - t0
            traces.append(trace)
            traces.append(full_trace(pre_cost_projective, stage1_runtime, trace))
            summary["stages"]["stage2"] = {
                "solver": spec.stage2_solver,
                "initial_cost": trace.initial_cost,
                "pre_stage1_cost": pre_cost_projective,
                "final_cost": trace.records[-1].cost,
                "iterations": trace.records[-1].iteration,
                "runtime_seconds": stage2_runtime,
            }

        if run_metric:
            t0 = time.perf_counter()
            result = upgrade(problem, state)
            summary["stages"]["metric"] = {
                "plane_at_infinity": result.state.c.tolist(),
                "orthogonality_error": result.orthogonality_error,
                "converged": result.converged,
                "runtime_seconds": time.perf_counter() - t0,
            }
            with open(out_dir / f"{stem}_metric.txt", "w") as fh:
                fh.write(f"cameras {len(result.rotations)}\n")
                for r, t in zip(result.rotations, result.translations):
                    vals = np.concatenate([r.ravel(), t])
                    fh.write(" ".join(format(v, ".17g") for v in vals) + "\n")
    except NumericFailureError as exc:
        failure = exc
        summary["error"] = str(exc)

    if traces:
        write_trace_csv(traces, out_dir / f"{stem}_trace.csv")
    write_state(state, out_dir / f"{stem}_state.txt")
    with open(out_dir / f"{stem}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    if failure is not None:
        raise failure
    return summary
