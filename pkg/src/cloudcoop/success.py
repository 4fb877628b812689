"""Per-class and total success probabilities under the threshold policies.

Poisson arrivals see the stationary distribution, so the success probability of
a class-i arrival is the stationary average of its conditional success: the
local sojourn CDF at ``T_i`` where the class is admitted, and the Internet delay
CDF at ``T_i`` where some cap ``L_j = B_j`` with ``j >= i`` diverts it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .delay import GridSpec, class_sojourn_table, internet_success, service_sojourn_cdf
from .domain import SystemConfig, TaskClassSpec
from .statespace import StateIndex, admission_matrix, build_generator, enumerate_states
from .stationary import StationaryDistribution, erlang_b, solve_stationary


@dataclass(frozen=True)
class PolicyOutcome:
    per_class_success: tuple[float, ...]
    total_success: float
    offload_fraction: tuple[float, ...]
    source: str = "analytic"
    policy: str = "PriorityCooperation"
    arrival_rates: tuple[float, ...] = ()
    ci_halfwidth: tuple[float, ...] | None = None
    total_ci_halfwidth: float | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        probs = (*self.per_class_success, self.total_success, *self.offload_fraction)
        if any(not (-1e-12 <= p <= 1 + 1e-12) for p in probs):
            raise ValueError(f"probabilities out of [0, 1]: {probs}")

    @property
    def total_offload(self) -> float | None:
        if not self.arrival_rates:
            return None
        return total_from_classes(self.arrival_rates, self.offload_fraction)


def total_from_classes(rates: Sequence[float], per_class: Sequence[float]) -> float:
    """Arrival-weighted mean of per-class success."""
    rates = np.asarray(rates, dtype=float)
    return float(np.dot(rates, per_class) / rates.sum())


def _local_success_matrix(cfg: SystemConfig, index: StateIndex, grid: GridSpec | None,
                          lookup_cfg: SystemConfig, queued_ahead: np.ndarray, admitted: np.ndarray) -> np.ndarray:
    """``(n_states, N)`` conditional local success where admitted, NaN elsewhere.

    ``lookup_cfg`` decides which higher-priority rate feeds the busy periods;
    ``queued_ahead[:, i]`` is the number of tasks ahead of a class-(i+1) arrival.
    """
    arr = index.as_array()
    full = arr[:, 0] == cfg.servers
    out = np.full((len(index), cfg.n_classes), np.nan)
    for i, bound in enumerate(cfg.delay_bounds):
        out[~full, i] = service_sojourn_cdf(cfg.service_rate, bound)
        waiting = full & admitted[:, i]
        if np.any(waiting):
            ahead = queued_ahead[waiting, i]
            table = class_sojourn_table(lookup_cfg, min(i + 1, lookup_cfg.n_classes), grid, bound=bound)
            out[waiting, i] = table.table(int(ahead.max()))[ahead]
    return out


def _mix(cfg: SystemConfig, pi: np.ndarray, admitted: np.ndarray, local: np.ndarray,
         source: str, policy: str, diagnostics: dict) -> PolicyOutcome:
    inet = internet_success(cfg.internet, np.asarray(cfg.delay_bounds))
    inet = np.atleast_1d(inet)
    per_class = []
    offload = []
    for i in range(cfg.n_classes):
        adm = admitted[:, i]
        per_class.append(float(pi[adm] @ local[adm, i] + pi[~adm].sum() * inet[i]))
        offload.append(float(pi[~adm].sum()))
    total = total_from_classes(cfg.arrival_rates, per_class)
    return PolicyOutcome(tuple(per_class), total, tuple(offload), source, policy, cfg.arrival_rates,
                         diagnostics=diagnostics)


def stationary_for(cfg: SystemConfig) -> tuple[StateIndex, StationaryDistribution]:
    index = enumerate_states(cfg)
    return index, solve_stationary(build_generator(cfg, index))


def analytic_success(cfg: SystemConfig, grid: GridSpec | None = None) -> PolicyOutcome:
    """Priority-based cooperation outcome for ``cfg.thresholds``."""
    index, dist = stationary_for(cfg)
    arr = index.as_array()
    queued_ahead = np.cumsum(arr[:, 1:], axis=1)
    admitted = admission_matrix(cfg, index)
    local = _local_success_matrix(cfg, index, grid, cfg, queued_ahead, admitted)
    diag = {"states": len(index), "residual": dist.residual, "thresholds": cfg.thresholds}
    return _mix(cfg, dist.probabilities, admitted, local, "analytic", "PriorityCooperation", diag)


def aggregate_config(cfg: SystemConfig, threshold: int) -> SystemConfig:
    """Single-class view of ``cfg``: one stream at the total rate, one queue capped at ``threshold``."""
    merged = TaskClassSpec(cfg.total_rate, cfg.delay_bounds[-1])
    return SystemConfig((merged,), cfg.servers, cfg.service_rate, (int(threshold),), cfg.internet)


def fcfs_analytic_success(cfg: SystemConfig, threshold: int, grid: GridSpec | None = None) -> PolicyOutcome:
    """FCFS cooperation: one FIFO queue, arrivals diverted when ``threshold`` tasks wait.

    A task that finds ``q`` waiting needs ``q + 1`` completions of the full pool
    before its own service starts. Success is evaluated at each class's own bound.
    """
    agg = aggregate_config(cfg, threshold)
    index, dist = stationary_for(agg)
    arr = index.as_array()
    queue = arr[:, 1]
    admitted = np.repeat(admission_matrix(agg, index), cfg.n_classes, axis=1)
    queued_ahead = np.repeat(queue[:, None], cfg.n_classes, axis=1)
    # the aggregate config has a single class, so every lookup uses no higher-priority traffic
    local = _local_success_matrix(cfg, index, grid, agg, queued_ahead, admitted)
    diag = {"states": len(index), "residual": dist.residual, "threshold": int(threshold)}
    return _mix(cfg, dist.probabilities, admitted, local, "analytic", "FcfsCooperation", diag)


def best_fcfs_threshold(cfg: SystemConfig, max_threshold: int = 200, grid: GridSpec | None = None,
                        patience: int = 10) -> tuple[int, PolicyOutcome, list[tuple[int, float]]]:
    """Sweep the FCFS threshold upward; stop after ``patience`` steps without improvement.

    Returns the best threshold, its outcome and the sweep.
    """
    sweep = []
    best_b, best = 0, None
    for b in range(max_threshold + 1):
        out = fcfs_analytic_success(cfg, b, grid)
        sweep.append((b, out.total_success))
        if best is None or out.total_success > best.total_success:
            best_b, best = b, out
        elif b - best_b >= patience:
            break
    return best_b, best, sweep


def nonbuffer_success(cfg: SystemConfig) -> PolicyOutcome:
    """Closed-form no-buffer outcome: Erlang-B blocking sends the task to the Internet."""
    blocked = erlang_b(cfg.servers, cfg.total_rate / cfg.service_rate)
    inet = np.atleast_1d(internet_success(cfg.internet, np.asarray(cfg.delay_bounds)))
    per_class = tuple(
        float((1 - blocked) * service_sojourn_cdf(cfg.service_rate, t) + blocked * p)
        for t, p in zip(cfg.delay_bounds, inet)
    )
    total = total_from_classes(cfg.arrival_rates, per_class)
    return PolicyOutcome(per_class, total, (blocked,) * cfg.n_classes, "analytic", "NonBuffer", cfg.arrival_rates)


CSV_FIELDS = ["lambda_total", "policy", "class", "success", "ci_halfwidth", "offload_fraction", "source"]


def outcome_rows(lambda_total: float, outcome: PolicyOutcome) -> list[dict]:
    """Long-format rows: one per class plus a ``total`` row."""
    rows = []
    ci = outcome.ci_halfwidth or (None,) * len(outcome.per_class_success)
    for i, (p, off, h) in enumerate(zip(outcome.per_class_success, outcome.offload_fraction, ci), start=1):
        rows.append({
            "lambda_total": lambda_total, "policy": outcome.policy, "class": str(i), "success": p,
            "ci_halfwidth": h, "offload_fraction": off, "source": outcome.source,
        })
    rows.append({
        "lambda_total": lambda_total, "policy": outcome.policy, "class": "total", "success": outcome.total_success,
        "ci_halfwidth": outcome.total_ci_halfwidth, "offload_fraction": outcome.total_offload,
        "source": outcome.source,
    })
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows: Iterable[dict], fields: Sequence[str] = CSV_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f)) for f in fields])
