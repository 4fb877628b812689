"""Core model of the local-cloud / Internet-cloud system.

Time is in milliseconds and rates are in tasks per millisecond throughout.
Priority 1 is the highest priority (the tightest delay bound).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants.

    ``violations`` lists every problem found, not only the first.
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


def _positive_finite(x: float) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x) and x > 0


@dataclass(frozen=True)
class TaskClassSpec:
    """One task class: Poisson arrival rate and (net) delay bound."""

    arrival_rate: float
    delay_bound: float
    priority_index: int = 1

    def __post_init__(self) -> None:
        problems = []
        if not _positive_finite(self.arrival_rate):
            problems.append(f"class {self.priority_index}: arrival_rate must be finite and > 0, got {self.arrival_rate}")
        if not _positive_finite(self.delay_bound):
            problems.append(f"class {self.priority_index}: delay_bound must be finite and > 0, got {self.delay_bound}")
        if not isinstance(self.priority_index, int) or self.priority_index < 1:
            problems.append(f"priority_index must be an integer >= 1, got {self.priority_index}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class InternetDelayParams:
    """Internet delay mixture ``p * phi1 + q * (phi1 conv phi2)`` with q = 1 - p.

    ``router_mean`` is the mean of the router-delay component and
    ``queue_mean`` the mean of the queuing-delay component, both exponential.
    """

    p: float = 0.5
    router_mean: float = 100.0
    queue_mean: float = 200.0

    def __post_init__(self) -> None:
        problems = _internet_violations(self)
        if problems:
            raise ConfigError(problems)

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def mean(self) -> float:
        return self.p * self.router_mean + self.q * (self.router_mean + self.queue_mean)


def _internet_violations(params: InternetDelayParams) -> list[str]:
    problems = []
    if not (isinstance(params.p, (int, float)) and 0.0 < params.p <= 1.0):
        problems.append(f"internet p must lie in (0, 1], got {params.p}")
    if not _positive_finite(params.router_mean):
        problems.append(f"internet router_mean must be finite and > 0, got {params.router_mean}")
    if not _positive_finite(params.queue_mean):
        problems.append(f"internet queue_mean must be finite and > 0, got {params.queue_mean}")
    return problems


@dataclass(frozen=True)
class SystemConfig:
    """Server pool, task classes, cumulative buffer thresholds and Internet model.

    ``thresholds[i]`` caps the total number of queued tasks of priorities
    ``1..i+1``. An empty ``thresholds`` means all zeros.
    """

    classes: tuple[TaskClassSpec, ...]
    servers: int
    service_rate: float
    thresholds: tuple[int, ...] = ()
    internet: InternetDelayParams = field(default_factory=InternetDelayParams)

    def __post_init__(self) -> None:
        classes = tuple(
            c if c.priority_index == i + 1 else replace(c, priority_index=i + 1)
            for i, c in enumerate(self.classes)
        )
        object.__setattr__(self, "classes", classes)
        thresholds = tuple(self.thresholds) if self.thresholds else (0,) * len(classes)
        object.__setattr__(self, "thresholds", thresholds)
        problems = _config_violations(self)
        if problems:
            raise ConfigError(problems)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def arrival_rates(self) -> tuple[float, ...]:
        return tuple(c.arrival_rate for c in self.classes)

    @property
    def delay_bounds(self) -> tuple[float, ...]:
        return tuple(c.delay_bound for c in self.classes)

    @property
    def total_rate(self) -> float:
        return math.fsum(self.arrival_rates)

    @property
    def pool_rate(self) -> float:
        """Aggregate service rate C * mu of a fully busy pool."""
        return self.servers * self.service_rate

    def with_thresholds(self, thresholds: Iterable[int]) -> "SystemConfig":
        return replace(self, thresholds=tuple(int(b) for b in thresholds))

    def with_total_rate(self, total: float) -> "SystemConfig":
        """Rescale all arrival rates so that they sum to ``total``, keeping the mix."""
        scale = total / self.total_rate
        classes = tuple(replace(c, arrival_rate=c.arrival_rate * scale) for c in self.classes)
        return replace(self, classes=classes)


def _config_violations(cfg: SystemConfig) -> list[str]:
    problems: list[str] = []
    if len(cfg.classes) < 1:
        problems.append("at least one task class is required")
    for c in cfg.classes:
        if not _positive_finite(c.arrival_rate):
            problems.append(f"class {c.priority_index}: arrival_rate must be finite and > 0")
        if not _positive_finite(c.delay_bound):
            problems.append(f"class {c.priority_index}: delay_bound must be finite and > 0")
    bounds = [c.delay_bound for c in cfg.classes]
    if any(a > b for a, b in zip(bounds, bounds[1:])):
        problems.append(f"delay bounds must be nondecreasing (T_1 <= ... <= T_N), got {tuple(bounds)}")
    if not isinstance(cfg.servers, int) or cfg.servers < 1:
        problems.append(f"servers must be an integer >= 1, got {cfg.servers}")
    if not _positive_finite(cfg.service_rate):
        problems.append(f"service_rate must be finite and > 0, got {cfg.service_rate}")
    if len(cfg.thresholds) != len(cfg.classes):
        problems.append(f"expected {len(cfg.classes)} thresholds, got {len(cfg.thresholds)}")
    if any(not isinstance(b, int) or b < 0 for b in cfg.thresholds):
        problems.append(f"thresholds must be integers >= 0, got {cfg.thresholds}")
    elif any(a > b for a, b in zip(cfg.thresholds, cfg.thresholds[1:])):
        problems.append(f"thresholds must be nondecreasing (B_1 <= ... <= B_N), got {cfg.thresholds}")
    problems.extend(_internet_violations(cfg.internet))
    return problems


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise ConfigError."""
    problems = _config_violations(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def cumulative_rates(cfg: SystemConfig) -> tuple[float, ...]:
    """Cumulative arrival rates ``(lambda_1, lambda_1 + lambda_2, ...)``."""
    out = []
    acc = 0.0
    for lam in cfg.arrival_rates:
        acc += lam
        out.append(acc)
    return tuple(out)


def higher_priority_rate(cfg: SystemConfig, class_index: int) -> float:
    """Aggregate rate of classes strictly above ``class_index`` (1-based); 0 for class 1."""
    if class_index <= 1:
        return 0.0
    return cumulative_rates(cfg)[class_index - 2]


def offered_loads(cfg: SystemConfig) -> tuple[float, ...]:
    """``Lambda_i / mu`` for each i (per-server offered load, in Erlangs)."""
    return tuple(lam / cfg.service_rate for lam in cumulative_rates(cfg))


def pool_utilizations(cfg: SystemConfig) -> tuple[float, ...]:
    """``Lambda_i / (C mu)``; values below 1 mean the classes 1..i alone are stable."""
    return tuple(lam / cfg.pool_rate for lam in cumulative_rates(cfg))


@dataclass(frozen=True)
class QueueState:
    """Markov state: busy servers and per-class queue lengths."""

    busy_servers: int
    queue_lengths: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "queue_lengths", tuple(int(x) for x in self.queue_lengths))
        if self.busy_servers < 0 or any(x < 0 for x in self.queue_lengths):
            raise ValueError(f"negative entries in state {self}")

    def cumulative(self) -> tuple[int, ...]:
        out = []
        acc = 0
        for x in self.queue_lengths:
            acc += x
            out.append(acc)
        return tuple(out)

    def check(self, cfg: SystemConfig) -> "QueueState":
        """Raise ValueError unless the state is feasible under ``cfg``."""
        if len(self.queue_lengths) != cfg.n_classes:
            raise ValueError(f"state {self} has wrong number of queues for {cfg.n_classes} classes")
        if self.busy_servers > cfg.servers:
            raise ValueError(f"state {self}: more busy servers than C={cfg.servers}")
        if self.busy_servers < cfg.servers and any(self.queue_lengths):
            raise ValueError(f"state {self}: tasks wait while a server is idle")
        for i, (L, b) in enumerate(zip(self.cumulative(), cfg.thresholds), start=1):
            if L > b:
                raise ValueError(f"state {self}: L_{i}={L} exceeds B_{i}={b}")
        return self

    def as_tuple(self) -> tuple[int, ...]:
        return (self.busy_servers, *self.queue_lengths)


def config_from_dict(data: dict[str, Any]) -> SystemConfig:
    """Build a config from the JSON document layout."""
    classes = tuple(
        TaskClassSpec(arrival_rate=float(c["arrival_rate"]), delay_bound=float(c["delay_bound"]), priority_index=i + 1)
        for i, c in enumerate(data["classes"])
    )
    inet = data.get("internet", {})
    internet = InternetDelayParams(
        p=float(inet.get("p", 0.5)),
        router_mean=float(inet.get("router_mean", 100.0)),
        queue_mean=float(inet.get("queue_mean", 200.0)),
    )
    return SystemConfig(
        classes=classes,
        servers=int(data["servers"]),
        service_rate=float(data["service_rate"]),
        thresholds=tuple(int(b) for b in data.get("thresholds", ())),
        internet=internet,
    )


def config_to_dict(cfg: SystemConfig) -> dict[str, Any]:
    return {
        "servers": cfg.servers,
        "service_rate": cfg.service_rate,
        "classes": [{"arrival_rate": c.arrival_rate, "delay_bound": c.delay_bound} for c in cfg.classes],
        "thresholds": list(cfg.thresholds),
        "internet": {"p": cfg.internet.p, "router_mean": cfg.internet.router_mean, "queue_mean": cfg.internet.queue_mean},
    }


def load_config(path: str | Path) -> SystemConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def reference_scenario(servers: int = 10, total_rate: float | None = None, thresholds: Sequence[int] = ()) -> SystemConfig:
    """Two classes with 50 ms / 300 ms bounds, 10 ms mean service, 200 ms mean Internet delay.

    ``total_rate`` defaults to 0.9 * C * mu, split evenly between the classes.
    """
    mu = 0.1
    if total_rate is None:
        total_rate = 0.9 * servers * mu
    return SystemConfig(
        classes=(TaskClassSpec(total_rate / 2, 50.0), TaskClassSpec(total_rate / 2, 300.0)),
        servers=servers,
        service_rate=mu,
        thresholds=tuple(thresholds),
        internet=InternetDelayParams(),
    )
