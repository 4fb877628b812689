"""Independent oracles shared by the test modules, plus the acceptance summary hook."""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy import special, stats

from cloudcoop.domain import SystemConfig

ACCEPTANCE_LINES: list[str] = []


def brute_force_states(cfg: SystemConfig) -> list[tuple[int, ...]]:
    """Every (s, l) in a box that satisfies the two state invariants, sorted."""
    top = max(cfg.thresholds, default=0)
    out = []
    for s in range(cfg.servers + 1):
        for l in itertools.product(range(top + 1), repeat=cfg.n_classes):
            if s < cfg.servers and any(l):
                continue
            if all(sum(l[: i + 1]) <= b for i, b in enumerate(cfg.thresholds)):
                out.append((s, *l))
    return sorted(out)


def brute_force_generator(cfg: SystemConfig) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Dense generator from the rules: an arrival is kept iff the post-arrival state is feasible."""
    states = brute_force_states(cfg)
    pos = {s: k for k, s in enumerate(states)}
    C, mu = cfg.servers, cfg.service_rate
    Q = np.zeros((len(states), len(states)))
    for k, st in enumerate(states):
        s, l = st[0], list(st[1:])
        for j, lam in enumerate(cfg.arrival_rates):
            if s < C:
                nxt = (s + 1, *l)
            else:
                nl = l.copy()
                nl[j] += 1
                nxt = (s, *nl)
            if nxt in pos:
                Q[k, pos[nxt]] += lam
        if s == C and any(l):
            nl = l.copy()
            nl[next(i for i, x in enumerate(l) if x)] -= 1
            Q[k, pos[(s, *nl)]] += C * mu
        elif s > 0:
            Q[k, pos[(s - 1, *l)]] += s * mu
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return states, Q


def lstsq_stationary(Q: np.ndarray) -> np.ndarray:
    """Stationary vector from the overdetermined system [Q^T; 1] pi = [0; 1]."""
    n = Q.shape[0]
    A = np.vstack([Q.T, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def first_passage_density(k: int, lam: float, rate: float, t: np.ndarray) -> np.ndarray:
    """Density of the time an M/M/1 queue (arrival ``lam``, service ``rate``) takes to drop by ``k``."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t > 0
    if lam == 0:
        return stats.gamma.pdf(t, k, scale=1.0 / rate)
    tp = t[pos]
    x = 2.0 * tp * np.sqrt(lam * rate)
    rho = lam / rate
    out[pos] = (k / tp) * rho ** (-k / 2) * np.exp(-(np.sqrt(rate) - np.sqrt(lam)) ** 2 * tp) * special.ive(k, x)
    out[~pos] = rate if k == 1 else 0.0
    return out


def erlang_cdf(k: int, rate: float, t) -> float:
    return stats.gamma.cdf(t, k, scale=1.0 / rate)


@pytest.fixture
def oracles():
    return {
        "states": brute_force_states,
        "generator": brute_force_generator,
        "stationary": lstsq_stationary,
        "first_passage": first_passage_density,
        "erlang_cdf": erlang_cdf,
    }


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
