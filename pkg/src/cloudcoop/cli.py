"""Batch runner: sweep the total arrival rate and write the three figure tables.

``fig5.csv`` compares priority cooperation with local-only execution,
``fig6.csv`` compares it with the non-priority baselines and ``fig7.csv``
lists the optimal thresholds found by the coordinate search.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .delay import GridSpec
from .domain import ConfigError, SystemConfig, TaskClassSpec, load_config, reference_scenario
from .optimizer import MemoObjective, exhaustive_search, find_local_optimal, success_objective
from .simulator import FcfsCooperation, Greedy, LocalOnly, NonBuffer, PriorityCooperation, SimConfig, run_simulation
from .success import (CSV_FIELDS, analytic_success, best_fcfs_threshold, nonbuffer_success, outcome_rows,
                      write_rows)

POLICIES = ("PriorityCooperation", "LocalOnly", "Greedy", "FcfsCooperation", "NonBuffer")
FIG5_POLICIES = ("PriorityCooperation", "LocalOnly")
FIG6_POLICIES = ("Greedy", "FcfsCooperation", "NonBuffer")
DEFAULT_GRID_POINTS = 12
DEFAULT_EXHAUSTIVE_BUDGET = 2500


@dataclass(frozen=True)
class ExperimentPlan:
    base: SystemConfig
    grid: tuple[float, ...]
    policies: tuple[str, ...] = POLICIES
    out_dir: Path = Path("results")
    seed: int = 0
    tasks: int = 200_000
    delay_grid: GridSpec = field(default_factory=GridSpec)
    jobs: int = 1
    exhaustive_budget: int = DEFAULT_EXHAUSTIVE_BUDGET

    def __post_init__(self) -> None:
        problems = []
        if not self.grid:
            problems.append("sweep grid is empty")
        if any(not (math.isfinite(x) and x > 0) for x in self.grid):
            problems.append("sweep rates must be positive and finite")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            problems.append("sweep grid must be strictly increasing")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            problems.append(f"unknown policies {unknown}; choose from {list(POLICIES)}")
        if not self.policies:
            problems.append("no policies selected")
        mix = self.mix
        if abs(math.fsum(mix) - 1.0) > 1e-12:
            problems.append(f"class mix sums to {math.fsum(mix)}, not 1")
        if self.jobs < 1:
            problems.append("jobs must be >= 1")
        if problems:
            raise ConfigError(problems)

    @property
    def mix(self) -> tuple[float, ...]:
        total = self.base.total_rate
        return tuple(r / total for r in self.base.arrival_rates)

    def wants(self, *names: str) -> bool:
        return any(n in self.policies for n in names)


@dataclass
class PointResult:
    index: int
    lambda_total: float
    fig5: list[dict] = field(default_factory=list)
    fig6: list[dict] = field(default_factory=list)
    fig7: dict | None = None
    errors: list[tuple[str, str]] = field(default_factory=list)


def default_grid(cfg: SystemConfig, count: int = DEFAULT_GRID_POINTS) -> tuple[float, ...]:
    """``count`` evenly spaced total rates from 0.2 to 1.4 times the pool rate."""
    return tuple(float(x) for x in np.linspace(0.2 * cfg.pool_rate, 1.4 * cfg.pool_rate, count))


def parse_grid(text: str) -> tuple[float, ...]:
    """Parse ``"start:stop:count"`` into evenly spaced absolute total rates."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:count, got {text!r}")
    try:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: {exc}") from None
    if count < 1:
        raise argparse.ArgumentTypeError("grid count must be >= 1")
    if count == 1:
        return (start,)
    return tuple(float(x) for x in np.linspace(start, stop, count))


def point_seed(seed: int, index: int) -> int:
    """Deterministic per-point seed, shared by all policies at that point."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _simulate(plan: ExperimentPlan, lam: float, cfg: SystemConfig, policy, seed: int) -> list[dict]:
    report = run_simulation(SimConfig(cfg, policy, tasks=plan.tasks, seed=seed, grid=plan.delay_grid))
    return outcome_rows(lam, report.to_outcome())


def _exhaustive_caps(thresholds: tuple[int, ...], budget: int) -> tuple[int, ...] | None:
    """Caps half again above the found optimum, or None when the box exceeds ``budget`` points."""
    top = int(math.ceil(1.5 * max(thresholds, default=0))) + 2
    caps = (top,) * len(thresholds)
    # nondecreasing vectors with entries in [0, top]
    size = math.comb(top + len(caps), len(caps))
    return caps if size <= budget else None


def run_point(plan: ExperimentPlan, index: int) -> PointResult:
    lam = plan.grid[index]
    res = PointResult(index, lam)
    cfg = plan.base.with_total_rate(lam)
    seed = point_seed(plan.seed, index)
    grid = plan.delay_grid

    def attempt(stage: str, fn):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - every failure is reported in the point table
            res.errors.append((stage, f"{type(exc).__name__}: {exc}"))
            return None

    prio_cfg = None
    if plan.wants("PriorityCooperation"):
        memo = MemoObjective(success_objective(cfg, grid), budget=10**9)
        search = attempt("optimize", lambda: find_local_optimal(cfg, objective=memo))
        if search is not None:
            prio_cfg = cfg.with_thresholds(search.thresholds)
            caps = _exhaustive_caps(search.thresholds, plan.exhaustive_budget)
            matched = None
            if caps is not None:
                ex = attempt("exhaustive", lambda: exhaustive_search(caps=caps, objective=memo))
                if ex is not None:
                    matched = abs(ex.total_success - search.total_success) <= 1e-12
            row = {"lambda_total": lam, "total_success": search.total_success, "evaluations": search.evaluations,
                   "matched_exhaustive": matched}
            row.update({f"B_{i}": b for i, b in enumerate(search.thresholds, start=1)})
            res.fig7 = row
            analytic = attempt("PriorityCooperation analytic", lambda: analytic_success(prio_cfg, grid))
            sim = attempt("PriorityCooperation simulation",
                          lambda: _simulate(plan, lam, prio_cfg, PriorityCooperation(), seed))
            for target, wanted in ((res.fig5, True), (res.fig6, plan.wants(*FIG6_POLICIES))):
                if wanted:
                    if analytic is not None:
                        target.extend(outcome_rows(lam, analytic))
                    if sim is not None:
                        target.extend(sim)

    if plan.wants("LocalOnly"):
        rows = attempt("LocalOnly simulation", lambda: _simulate(plan, lam, cfg, LocalOnly(), seed))
        res.fig5.extend(rows or [])

    if plan.wants("Greedy"):
        rows = attempt("Greedy simulation", lambda: _simulate(plan, lam, cfg, Greedy(), seed))
        res.fig6.extend(rows or [])

    if plan.wants("FcfsCooperation"):
        best = attempt("FcfsCooperation analytic", lambda: best_fcfs_threshold(cfg, grid=grid))
        if best is not None:
            b, outcome, _ = best
            res.fig6.extend(outcome_rows(lam, outcome))
            rows = attempt("FcfsCooperation simulation", lambda: _simulate(plan, lam, cfg, FcfsCooperation(b), seed))
            res.fig6.extend(rows or [])

    if plan.wants("NonBuffer"):
        outcome = attempt("NonBuffer analytic", lambda: nonbuffer_success(cfg))
        if outcome is not None:
            res.fig6.extend(outcome_rows(lam, outcome))
        rows = attempt("NonBuffer simulation", lambda: _simulate(plan, lam, cfg, NonBuffer(), seed))
        res.fig6.extend(rows or [])
    return res


def _atomic_write(path: Path, rows: list[dict], fields: Sequence[str]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_rows(tmp, rows, fields)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def run_plan(plan: ExperimentPlan) -> tuple[dict[str, Path], list[PointResult]]:
    """Run every sweep point, then write the requested CSVs once. Returns (written files, point results)."""
    indices = range(len(plan.grid))
    if plan.jobs > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            results = list(pool.map(run_point, [plan] * len(plan.grid), indices))
    else:
        results = [run_point(plan, i) for i in indices]

    plan.out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    n = plan.base.n_classes
    if plan.wants(*FIG5_POLICIES):
        written["fig5"] = plan.out_dir / "fig5.csv"
        _atomic_write(written["fig5"], [r for p in results for r in p.fig5], CSV_FIELDS)
    if plan.wants(*FIG6_POLICIES):
        written["fig6"] = plan.out_dir / "fig6.csv"
        _atomic_write(written["fig6"], [r for p in results for r in p.fig6], CSV_FIELDS)
    if plan.wants("PriorityCooperation"):
        fields = ["lambda_total", *(f"B_{i}" for i in range(1, n + 1)), "total_success", "evaluations",
                  "matched_exhaustive"]
        written["fig7"] = plan.out_dir / "fig7.csv"
        _atomic_write(written["fig7"], [p.fig7 for p in results if p.fig7 is not None], fields)
    return written, results


def error_table(results: list[PointResult]) -> str:
    lines = [f"{'point':>5}  {'lambda_total':>14}  {'stage':<32}  error"]
    for p in results:
        for stage, msg in p.errors:
            lines.append(f"{p.index:>5}  {p.lambda_total:>14.6g}  {stage:<32}  {msg}")
    return "\n".join(lines)


def _positive_float(text: str) -> float:
    value = float(text)
    if not (math.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def _mix(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad class mix {text!r}") from None
    if any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("class mix fractions must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cloudcoop", description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="JSON system config (default: two-class 50/300 ms scenario)")
    ap.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
    ap.add_argument("--grid", type=parse_grid, help="absolute total rates start:stop:count in tasks/ms")
    ap.add_argument("--policies", default=",".join(POLICIES), help="comma-separated subset of " + ",".join(POLICIES))
    ap.add_argument("--tasks", type=int, default=200_000, help="simulated tasks per policy and point")
    ap.add_argument("--dt", type=_positive_float, help="delay grid step in ms")
    ap.add_argument("--horizon", type=_positive_float, help="delay grid horizon in ms")
    ap.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel")
    ap.add_argument("--servers", type=int, help="override the number of local servers C")
    ap.add_argument("--mix", type=_mix, help="override the class mix, e.g. 0.5,0.5")
    ap.add_argument("--exhaustive-budget", type=int, default=DEFAULT_EXHAUSTIVE_BUDGET,
                    help="largest threshold box checked exhaustively per point")
    return ap


def plan_from_args(args: argparse.Namespace) -> ExperimentPlan:
    base = load_config(args.config) if args.config else reference_scenario()
    if args.servers is not None:
        base = replace(base, servers=args.servers)
    if args.mix is not None:
        if len(args.mix) != base.n_classes:
            raise ConfigError([f"mix has {len(args.mix)} entries for {base.n_classes} classes"])
        norm = math.fsum(args.mix)
        classes = tuple(TaskClassSpec(base.total_rate * m / norm, c.delay_bound, c.priority_index)
                        for m, c in zip(args.mix, base.classes))
        base = replace(base, classes=classes)
    if not 0 <= args.seed < 2**64:
        raise ConfigError([f"seed {args.seed} is not an unsigned 64-bit integer"])
    policies = tuple(p.strip() for p in args.policies.split(",") if p.strip())
    return ExperimentPlan(
        base=base,
        grid=args.grid if args.grid is not None else default_grid(base),
        policies=policies,
        out_dir=args.out,
        seed=args.seed,
        tasks=args.tasks,
        delay_grid=GridSpec(dt=args.dt, horizon=args.horizon),
        jobs=args.jobs,
        exhaustive_budget=args.exhaustive_budget,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        plan = plan_from_args(args)
    except (ConfigError, OSError, KeyError, ValueError) as exc:
        print(f"cloudcoop: invalid plan: {exc}", file=sys.stderr)
        return 2
    try:
        written, results = run_plan(plan)
    except Exception:  # noqa: BLE001 - surface unexpected failures with a trace and nonzero exit
        traceback.print_exc()
        return 1
    for name, path in written.items():
        print(f"wrote {name}: {path}")
    if any(p.errors for p in results):
        print(error_table(results), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
