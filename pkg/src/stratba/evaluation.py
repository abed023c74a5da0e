"""Convergence traces, cost thresholds, and runtime/accuracy profiles.

A profile answers: for a family of solvers on a set of problems, what fraction
of problems does each solver bring below an accuracy threshold within a factor
``alpha`` of the fastest solver's time? The threshold for a problem
interpolates between the shared initial cost and the best cost any solver
reached:

    threshold = best + tau * (initial - best)

Problems no solver reaches stay in the denominator and credit nobody.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, NamedTuple

import numpy as np

UNREACHED = None

TRACE_HEADER = ["problem", "solver", "stage", "iteration", "cost", "elapsed_seconds"]
PROFILE_HEADER = ["tau", "solver", "alpha", "percentage"]

# Requested sampling grid for profile curves, in addition to exact breakpoints.
ALPHA_GRID = np.geomspace(1.0, 32.0, 49)


class TraceRecord(NamedTuple):
    iteration: int
    cost: float
    elapsed_seconds: float


@dataclass
class ConvergenceTrace:
    """Per-iteration (cost, cumulative runtime) records of one solver run."""

    solver_id: str
    problem_id: str
    stage: str
    records: list[TraceRecord]
    initial_cost: float

    def __post_init__(self):
        if not self.records:
            raise ValueError("a trace needs at least one record")
        if self.records[0].cost != self.initial_cost:
            raise ValueError("first record must carry the initial cost")
        times = [r.elapsed_seconds for r in self.records]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("elapsed seconds must be non-decreasing")

    def best_cost(self) -> float:
        return min(r.cost for r in self.records)


def cost_threshold(traces: Iterable[ConvergenceTrace], tau: float) -> float:
    """Accuracy threshold for one problem given every solver's trace on it."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces given")
    f0 = traces[0].initial_cost
    for t in traces[1:]:
        if t.initial_cost != f0:
            raise ValueError(
                f"traces disagree on the initial cost: {t.initial_cost!r} vs {f0!r} "
                f"({t.solver_id} vs {traces[0].solver_id})")
    f_star = min(t.best_cost() for t in traces)
    return f_star + tau * (f0 - f_star)


def time_to_threshold(trace: ConvergenceTrace, threshold: float) -> float | None:
    """Elapsed seconds of the first record at or below the threshold, else None."""
    for rec in trace.records:
        if rec.cost <= threshold:
            return rec.elapsed_seconds
    return UNREACHED


@dataclass
class ProfileResult:
    """Step curve alpha -> percentage of problems solved within alpha x best time."""

    tau: float
    solver_id: str
    curve: list[tuple[float, float]]  # (alpha >= 1, percentage in [0, 100])


def performance_profile(traces: Iterable[ConvergenceTrace], tau: float
                        ) -> dict[str, ProfileResult]:
    """Profiles for every solver appearing in the traces.

    Curves are sampled at the union of the exact runtime-ratio breakpoints and
    a log-spaced grid on [1, 32].
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces given")
    solvers = sorted({t.solver_id for t in traces})
    problems = sorted({t.problem_id for t in traces})
    by_problem: dict[str, list[ConvergenceTrace]] = {p: [] for p in problems}
    for t in traces:
        by_problem[t.problem_id].append(t)

    times: dict[str, dict[str, float | None]] = {s: {} for s in solvers}
    t_min: dict[str, float] = {}
    for p, group in by_problem.items():
        threshold = cost_threshold(group, tau)
        best = math.inf
        for t in group:
            reach = time_to_threshold(t, threshold)
            times[t.solver_id][p] = reach
            if reach is not None:
                best = min(best, reach)
        t_min[p] = best

    breakpoints = set()
    for s in solvers:
        for p, reach in times[s].items():
            if reach is None or not math.isfinite(t_min[p]):
                continue
            if t_min[p] > 0:
                breakpoints.add(reach / t_min[p])
            elif reach == 0:
                breakpoints.add(1.0)
    alphas = sorted({1.0, *ALPHA_GRID.tolist(), *(b for b in breakpoints if b >= 1.0)})

    n_problems = len(problems)
    out = {}
    for s in solvers:
        curve = []
        for alpha in alphas:
            solved = 0
            for p in problems:
                reach = times[s].get(p)
                if reach is None or not math.isfinite(t_min[p]):
                    continue
                if reach <= alpha * t_min[p]:
                    solved += 1
            curve.append((alpha, 100.0 * solved / n_problems))
        out[s] = ProfileResult(tau, s, curve)
    return out


# ---------------------------------------------------------------------------
# CSV emission (lossless at 17 significant digits)


def _fmt(x: float) -> str:
    return format(x, ".17g")


def _open_sink(sink, mode: str):
    if isinstance(sink, (str, Path)):
        return open(sink, mode, newline=""), True
    return sink, False


def write_trace_csv(traces: Iterable[ConvergenceTrace], sink: str | Path | IO[str]) -> None:
    fh, owned = _open_sink(sink, "w")
    try:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t in traces:
            for rec in t.records:
                w.writerow([t.problem_id, t.solver_id, t.stage, rec.iteration,
                            _fmt(rec.cost), _fmt(rec.elapsed_seconds)])
    finally:
        if owned:
            fh.close()


def read_trace_csv(source: str | Path | IO[str]) -> list[ConvergenceTrace]:
    fh, owned = _open_sink(source, "r")
    try:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected trace CSV header: {header}")
        grouped: dict[tuple[str, str, str], list[TraceRecord]] = {}
        for row in rd:
            if not row:
                continue
            problem, solver, stage, it, cost, elapsed = row
            key = (problem, solver, stage)
            grouped.setdefault(key, []).append(
                TraceRecord(int(it), float(cost), float(elapsed)))
        return [
            ConvergenceTrace(solver, problem, stage, recs, recs[0].cost)
            for (problem, solver, stage), recs in grouped.items()
        ]
    finally:
        if owned:
            fh.close()


def write_profile_csv(profiles: Iterable[ProfileResult], sink: str | Path | IO[str]) -> None:
    fh, owned = _open_sink(sink, "w")
    try:
        w = csv.writer(fh)
        w.writerow(PROFILE_HEADER)
        for p in profiles:
            for alpha, pct in p.curve:
                w.writerow([_fmt(p.tau), p.solver_id, _fmt(alpha), _fmt(pct)])
    finally:
        if owned:
            fh.close()


def read_profile_csv(source: str | Path | IO[str]) -> list[ProfileResult]:
    fh, owned = _open_sink(source, "r")
    try:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != PROFILE_HEADER:
            raise ValueError(f"unexpected profile CSV header: {header}")
        grouped: dict[tuple[float, str], list[tuple[float, float]]] = {}
        for row in rd:
            if not row:
                continue
            tau, solver, alpha, pct = row
            grouped.setdefault((float(tau), solver), []).append((float(alpha), float(pct)))
        return [ProfileResult(tau, solver, curve) for (tau, solver), curve in grouped.items()]
    finally:
        if owned:
            fh.close()
