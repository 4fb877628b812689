"""Discrete-event simulation of the local pool plus Internet cloud under each routing policy.

Every task's outcome is fixed when its service starts (or when it is routed
to the Internet), so the event list only needs completion times. Arrivals,
service times and Internet delays are drawn up front from independent
streams and indexed by arrival order, which makes runs with the same seed
share sample paths across policies.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.stats import t as student_t

from .delay import (GridSpec, HorizonOverflow, UnstableBusyPeriod, class_sojourn_table, internet_success,
                    sample_internet_delay, service_sojourn_cdf, sojourn_success_given_state)
from .domain import ConfigError, QueueState, SystemConfig
from .success import PolicyOutcome, total_from_classes

MIN_REPORTED_TASKS = 10_000
Z95 = 1.959963984540054
_ARRIVAL_CHUNK = 1 << 16


@dataclass(frozen=True)
class PriorityCooperation:
    """Cumulative-threshold priority queues; ``None`` uses the config's thresholds."""

    thresholds: tuple[int, ...] | None = None
    name = "PriorityCooperation"


@dataclass(frozen=True)
class LocalOnly:
    name = "LocalOnly"


@dataclass(frozen=True)
class Greedy:
    name = "Greedy"


@dataclass(frozen=True)
class FcfsCooperation:
    threshold: int
    name = "FcfsCooperation"


@dataclass(frozen=True)
class NonBuffer:
    name = "NonBuffer"


Policy = Union[PriorityCooperation, LocalOnly, Greedy, FcfsCooperation, NonBuffer]


@dataclass(frozen=True)
class SimConfig:
    system: SystemConfig
    policy: Policy
    tasks: int = 100_000
    warmup: float = 0.1
    seed: int = 0
    record_occupancy: bool = False
    occupancy_batches: int = 20
    grid: GridSpec | None = None
    trace_limit: int = 0

    def __post_init__(self) -> None:
        problems = []
        if self.tasks < MIN_REPORTED_TASKS:
            problems.append(f"task budget {self.tasks} below {MIN_REPORTED_TASKS}")
        if not 0.0 <= self.warmup <= 0.5:
            problems.append(f"warmup fraction {self.warmup} outside [0, 0.5]")
        if self.occupancy_batches < 2:
            problems.append("need at least two occupancy batches")
        if isinstance(self.policy, FcfsCooperation) and self.policy.threshold < 0:
            problems.append("FCFS threshold must be >= 0")
        if isinstance(self.policy, PriorityCooperation) and self.policy.thresholds is not None:
            try:
                self.system.with_thresholds(self.policy.thresholds)
            except ConfigError as exc:
                problems.extend(exc.violations)
        if problems:
            raise ConfigError(problems)

    @property
    def effective_system(self) -> SystemConfig:
        if isinstance(self.policy, PriorityCooperation) and self.policy.thresholds is not None:
            return self.system.with_thresholds(self.policy.thresholds)
        return self.system


@dataclass(frozen=True)
class OccupancyEstimate:
    state: tuple[int, ...]
    fraction: float
    halfwidth: float


@dataclass(frozen=True)
class SimReport:
    policy: str
    per_class_success: tuple[float, ...]
    ci_halfwidth: tuple[float, ...]
    total_success: float
    total_ci_halfwidth: float
    offload_fraction: tuple[float, ...]
    mean_sojourn: tuple[float | None, ...]
    counts: tuple[int, ...]
    arrival_rates: tuple[float, ...]
    occupancy: tuple[OccupancyEstimate, ...] | None = None
    unstable: bool = False
    queue_trend: tuple[float, ...] = ()
    trace: tuple[tuple, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if any(not 0.0 <= p <= 1.0 for p in (*self.per_class_success, self.total_success, *self.offload_fraction)):
            raise ValueError("success and offload fractions must lie in [0, 1]")
        if any(h < 0 for h in (*self.ci_halfwidth, self.total_ci_halfwidth)):
            raise ValueError("CI half-widths must be >= 0")

    def occupancy_of(self, state: tuple[int, ...]) -> OccupancyEstimate:
        for est in self.occupancy or ():
            if est.state == tuple(state):
                return est
        return OccupancyEstimate(tuple(state), 0.0, 0.0)

    def to_outcome(self) -> PolicyOutcome:
        return PolicyOutcome(self.per_class_success, self.total_success, self.offload_fraction, "simulation",
                             self.policy, self.arrival_rates, self.ci_halfwidth, self.total_ci_halfwidth,
                             {"unstable": self.unstable, "counts": self.counts})


def greedy_decision(state: QueueState, class_index: int, cfg: SystemConfig, grid: GridSpec | None = None) -> str:
    """``"local"`` iff the local success estimate is at least the Internet success at ``T_i``."""
    bound = cfg.delay_bounds[class_index - 1]
    remote = float(internet_success(cfg.internet, bound))
    try:
        local = sojourn_success_given_state(cfg, state, class_index, grid)
    except (UnstableBusyPeriod, HorizonOverflow):
        # the busy period never clears or has drifted past the horizon: local success is negligible
        local = 0.0
    return "local" if local >= remote else "internet"


def _greedy_cutoffs(cfg: SystemConfig, grid: GridSpec | None) -> list[int]:
    """Per class, the smallest number queued ahead at which a full pool loses to the Internet.

    Local success is nonincreasing in the number queued ahead, so one cutoff per class
    reproduces ``greedy_decision`` for every full-pool state.
    """
    cutoffs = []
    for i, bound in enumerate(cfg.delay_bounds, start=1):
        remote = float(internet_success(cfg.internet, bound))
        try:
            table = class_sojourn_table(cfg, i, grid)
        except UnstableBusyPeriod:
            cutoffs.append(0)
            continue
        n = 0
        while True:
            try:
                if table.success(n) < remote:
                    break
            except HorizonOverflow:
                break
            n += 1
        cutoffs.append(n)
    return cutoffs


def _arrivals(cfg: SystemConfig, streams: list[np.random.Generator], n: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``n`` merged arrivals as (times, 0-based classes), per-class streams kept independent."""
    rates = cfg.arrival_rates
    horizon = 1.05 * n / cfg.total_rate + 50.0 / min(rates)
    per_class: list[list[np.ndarray]] = [[] for _ in rates]
    last = [0.0] * len(rates)
    while True:
        for i, lam in enumerate(rates):
            while last[i] < horizon:
                chunk = last[i] + np.cumsum(streams[i].exponential(1.0 / lam, _ARRIVAL_CHUNK))
                per_class[i].append(chunk)
                last[i] = float(chunk[-1])
        times = np.concatenate([np.concatenate(c) for c in per_class])
        if np.count_nonzero(times <= horizon) >= n:
            break
        horizon *= 1.1
    classes = np.concatenate([np.full(sum(len(c) for c in per_class[i]), i, dtype=np.int64)
                              for i in range(len(rates))])
    keep = times <= horizon
    times, classes = times[keep], classes[keep]
    order = np.lexsort((classes, times))[:n]
    return times[order], classes[order]


def _queue_trend(samples: list[int]) -> tuple[float, ...]:
    """Mean total queue length in each quarter of the measured window."""
    if len(samples) < 4:
        return ()
    return tuple(float(np.mean(part)) for part in np.array_split(np.asarray(samples, dtype=float), 4))


def _growing(trend: tuple[float, ...]) -> bool:
    return (len(trend) == 4 and all(b > a for a, b in zip(trend, trend[1:]))
            and trend[-1] > 1.5 * trend[0] + 5.0)


def run_simulation(sim: SimConfig) -> SimReport:
    cfg = sim.effective_system
    policy = sim.policy
    n_cls = cfg.n_classes
    C = cfg.servers
    bounds = cfg.delay_bounds
    n = sim.tasks
    warm = int(sim.warmup * n)

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(sim.seed).spawn(n_cls + 2)]
    times_arr, classes_arr = _arrivals(cfg, streams[:n_cls], n)
    service_arr = streams[n_cls].exponential(1.0 / cfg.service_rate, n)
    inet_arr = sample_internet_delay(cfg.internet, streams[n_cls + 1], n)
    times = times_arr.tolist()
    classes = classes_arr.tolist()
    service = service_arr.tolist()
    inet = inet_arr.tolist()

    fifo = isinstance(policy, FcfsCooperation)
    n_queues = 1 if fifo else n_cls
    queues = [deque() for _ in range(n_queues)]
    lens = [0] * n_queues
    caps: list[float]
    if isinstance(policy, PriorityCooperation):
        caps = [float(b) for b in cfg.thresholds]
    elif fifo:
        caps = [float(policy.threshold)]
    elif isinstance(policy, NonBuffer):
        caps = [0.0] * n_queues
    else:
        caps = [math.inf] * n_queues
    greedy = isinstance(policy, Greedy)
    if greedy:
        cutoffs = _greedy_cutoffs(cfg, sim.grid)
        idle_local = [float(service_sojourn_cdf(cfg.service_rate, b)) >= float(internet_success(cfg.internet, b))
                      for b in bounds]

    success = [0] * n_cls
    offloaded = [0] * n_cls
    count = [0] * n_cls
    sojourn_sum = [0.0] * n_cls

    record = sim.record_occupancy
    n_batches = sim.occupancy_batches
    occ: list[dict] = [dict() for _ in range(n_batches)]
    batch_len = [0.0] * n_batches
    measured = max(n - warm, 1)
    last_t = times[warm] if warm < n else 0.0
    batch = 0
    queue_samples: list[int] = []
    trace: list[tuple] = []
    trace_limit = sim.trace_limit

    heap: list[float] = []
    push, pop = heapq.heappush, heapq.heappop
    busy = 0
    waiting = 0

    def settle(task: int, start: float) -> None:
        if task < warm:
            return
        c = classes[task]
        soj = start - times[task] + service[task]
        count[c] += 1
        sojourn_sum[c] += soj
        if soj <= bounds[c]:
            success[c] += 1

    def tally(now: float) -> None:
        nonlocal last_t
        key = (busy, *lens)
        d = occ[batch]
        d[key] = d.get(key, 0.0) + (now - last_t)
        batch_len[batch] += now - last_t
        last_t = now

    def complete(tc: float) -> None:
        nonlocal busy, waiting
        if record and tc > last_t and measuring:
            tally(tc)
        if waiting:
            for q in range(n_queues):
                if lens[q]:
                    break
            task = queues[q].popleft()
            lens[q] -= 1
            waiting -= 1
            push(heap, tc + service[task])
            settle(task, tc)
            if len(trace) < trace_limit:
                trace.append((tc, "start", task, classes[task]))
        else:
            busy -= 1
        assert busy == C or waiting == 0, "server idle while tasks wait"

    measuring = False
    for k in range(n):
        t = times[k]
        while heap and heap[0] <= t:
            complete(pop(heap))
        if k == warm:
            measuring = True
            last_t = t
        elif record and measuring:
            tally(t)
            b = (k - warm) * n_batches // measured
            if b != batch:
                batch = b
        c = classes[k]
        if len(trace) < trace_limit:
            trace.append((t, "arrive", k, c))
        if k >= warm:
            queue_samples.append(waiting)

        local = True
        if busy < C:
            if greedy and not idle_local[c]:
                local = False
        elif greedy:
            local = sum(lens[: c + 1]) < cutoffs[c]
        elif fifo:
            local = lens[0] < caps[0]
        else:
            cum = 0
            for q in range(n_queues):
                cum += lens[q]
                if q >= c and cum >= caps[q]:
                    local = False
                    break

        if not local:
            if k >= warm:
                count[c] += 1
                offloaded[c] += 1
                sojourn_sum[c] += inet[k]
                if inet[k] <= bounds[c]:
                    success[c] += 1
            if len(trace) < trace_limit:
                trace.append((t, "offload", k, c))
        elif busy < C:
            busy += 1
            push(heap, t + service[k])
            settle(k, t)
        else:
            q = 0 if fifo else c
            queues[q].append(k)
            lens[q] += 1
            waiting += 1
    measuring = False
    while heap:
        complete(pop(heap))
    assert waiting == 0 and busy == 0

    per_class = []
    halfwidth = []
    for c in range(n_cls):
        m = count[c]
        p = success[c] / m if m else 0.0
        per_class.append(p)
        halfwidth.append(Z95 * math.sqrt(p * (1 - p) / m) if m else 0.0)
    total_n = sum(count)
    total = sum(success) / total_n if total_n else 0.0
    total_hw = Z95 * math.sqrt(total * (1 - total) / total_n) if total_n else 0.0

    occupancy = None
    if record:
        occupancy = _occupancy_estimates(occ, batch_len)
    trend = _queue_trend(queue_samples)
    unstable = isinstance(policy, LocalOnly) and _growing(trend)

    return SimReport(
        policy=policy.name,
        per_class_success=tuple(per_class),
        ci_halfwidth=tuple(halfwidth),
        total_success=total,
        total_ci_halfwidth=total_hw,
        offload_fraction=tuple(offloaded[c] / count[c] if count[c] else 0.0 for c in range(n_cls)),
        mean_sojourn=tuple(sojourn_sum[c] / count[c] if count[c] else None for c in range(n_cls)),
        counts=tuple(count),
        arrival_rates=cfg.arrival_rates,
        occupancy=occupancy,
        unstable=unstable,
        queue_trend=trend,
        trace=tuple(trace),
    )


def _occupancy_estimates(occ: list[dict], batch_len: list[float]) -> tuple[OccupancyEstimate, ...]:
    """Time-weighted state fractions with batch-means 95% half-widths."""
    used = [i for i, d in enumerate(batch_len) if d > 0]
    total = sum(batch_len[i] for i in used)
    states = sorted({s for i in used for s in occ[i]})
    quantile = float(student_t.ppf(0.975, len(used) - 1)) if len(used) > 1 else 0.0
    out = []
    for s in states:
        fractions = np.array([occ[i].get(s, 0.0) / batch_len[i] for i in used])
        mean = sum(occ[i].get(s, 0.0) for i in used) / total
        hw = quantile * float(np.std(fractions, ddof=1)) / math.sqrt(len(used)) if len(used) > 1 else 0.0
        out.append(OccupancyEstimate(s, mean, hw))
    return tuple(out)
