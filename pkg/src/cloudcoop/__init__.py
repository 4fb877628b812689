"""Threshold-based cooperative scheduling between a local cloud and an Internet cloud."""

from .domain import ConfigError, InternetDelayParams, QueueState, SystemConfig, TaskClassSpec, reference_scenario
from .optimizer import exhaustive_search, find_local_optimal
from .simulator import SimConfig, SimReport, run_simulation
from .success import PolicyOutcome, analytic_success

__all__ = [
    "ConfigError", "InternetDelayParams", "PolicyOutcome", "QueueState", "SimConfig", "SimReport",
    "SystemConfig", "TaskClassSpec", "analytic_success", "exhaustive_search", "find_local_optimal",
    "reference_scenario", "run_simulation",
]
