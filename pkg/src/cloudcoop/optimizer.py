"""Buffer-threshold search: recursive coordinate search and an exhaustive oracle."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .delay import GridSpec
from .domain import SystemConfig
from .success import analytic_success

Thresholds = tuple[int, ...]
Objective = Callable[[Thresholds], float]


class SearchBudgetExceeded(RuntimeError):
    def __init__(self, message: str, trace: list):
        self.trace = trace
        super().__init__(message)


class CapBoundaryWarning(UserWarning):
    """The exhaustive optimum touches a cap; the caps may be too small."""


@dataclass(frozen=True)
class TraceEntry:
    thresholds: Thresholds
    success: float
    cached: bool


@dataclass(frozen=True)
class ThresholdSearchResult:
    thresholds: Thresholds
    total_success: float
    evaluations: int
    trace: tuple[TraceEntry, ...] = field(repr=False)
    at_cap: bool = False


class MemoObjective:
    """Memoized objective that records every lookup and enforces a budget."""

    def __init__(self, fn: Objective, budget: int):
        self.fn = fn
        self.budget = budget
        self.cache: dict[Thresholds, float] = {}
        self.trace: list[TraceEntry] = []

    def __call__(self, b: Sequence[int]) -> float:
        key = tuple(int(x) for x in b)
        if key in self.cache:
            self.trace.append(TraceEntry(key, self.cache[key], True))
            return self.cache[key]
        if len(self.cache) >= self.budget:
            raise SearchBudgetExceeded(f"evaluation budget of {self.budget} exhausted at B={key}", list(self.trace))
        val = float(self.fn(key))
        self.cache[key] = val
        self.trace.append(TraceEntry(key, val, False))
        return val


def success_objective(cfg: SystemConfig, grid: GridSpec | None = None) -> Objective:
    """Total analytic success of ``cfg`` as a function of the threshold vector."""

    def objective(b: Thresholds) -> float:
        return analytic_success(cfg.with_thresholds(b), grid).total_success

    return objective


def find_local_optimal(cfg: SystemConfig | None = None, *, n_classes: int | None = None,
                       objective: Objective | None = None, grid: GridSpec | None = None,
                       max_evaluations: int = 10_000) -> ThresholdSearchResult:
    """Recursive coordinate search over nondecreasing thresholds.

    Starting from all zeros, coordinate i is swept upward from ``B_{i-1}``
    (with ``B_0 = 0``); for each value the tail ``B_{i+1..N}`` is re-optimized
    the same way. The sweep continues while total success does not decrease,
    so plateaus are walked through, then steps back once. Either ``cfg`` or an
    explicit ``objective`` with ``n_classes`` must be supplied.
    """
    if objective is None:
        if cfg is None:
            raise ValueError("need a config or an objective")
        objective = success_objective(cfg, grid)
    n = n_classes if n_classes is not None else cfg.n_classes
    f = MemoObjective(objective, max_evaluations)
    B = [0] * (n + 1)  # B[0] is the fixed lower bound, B[1..n] the thresholds

    def value() -> float:
        return f(B[1:])

    def optimize(i: int) -> None:
        for k in range(i, n + 1):
            B[k] = B[i - 1]
        if i == n:
            p1 = value()
            p2 = p1
            while p1 <= p2:
                B[n] += 1
                p1 = p2
                p2 = value()
            B[n] -= 1
        else:
            optimize(i + 1)
            p1 = value()
            p2 = p1
            while p1 <= p2:
                B[i] += 1
                optimize(i + 1)
                p1 = p2
                p2 = value()
            B[i] -= 1
            optimize(i + 1)

    optimize(1)
    best = tuple(B[1:])
    return ThresholdSearchResult(best, f(best), len(f.cache), tuple(f.trace))


def exhaustive_search(cfg: SystemConfig | None = None, caps: Sequence[int] = (), *,
                      objective: Objective | None = None, grid: GridSpec | None = None) -> ThresholdSearchResult:
    """Evaluate every nondecreasing ``B`` with ``B_i <= caps[i]``; ties go to the lexicographically smallest.

    Warns with CapBoundaryWarning when the optimum sits on a cap.
    """
    if objective is None:
        if cfg is None:
            raise ValueError("need a config or an objective")
        objective = success_objective(cfg, grid)
    caps = tuple(int(c) for c in caps)
    f = MemoObjective(objective, budget=10**12)
    best_b: Thresholds | None = None
    best_v = -float("inf")
    for b in itertools.product(*(range(c + 1) for c in caps)):
        if any(x > y for x, y in zip(b, b[1:])):
            continue
        v = f(b)
        if v > best_v:
            best_b, best_v = b, v
    assert best_b is not None
    at_cap = any(x == c for x, c in zip(best_b, caps))
    if at_cap and any(c > 0 for c in caps):
        warnings.warn(f"exhaustive optimum {best_b} touches caps {caps}; raise the caps", CapBoundaryWarning, stacklevel=2)
    return ThresholdSearchResult(best_b, best_v, len(f.cache), tuple(f.trace), at_cap)
