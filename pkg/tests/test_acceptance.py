"""Acceptance criteria 1 to 10, one test each; verdict lines are collected for the terminal summary."""

import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from cloudcoop.cli import default_grid, main, point_seed
from cloudcoop.delay import busy_period_lst, busy_period_pdf, trapezoid_convolve, waiting_time_density
from cloudcoop.domain import SystemConfig, TaskClassSpec, reference_scenario
from cloudcoop.optimizer import CapBoundaryWarning, exhaustive_search, find_local_optimal, success_objective
from cloudcoop.simulator import FcfsCooperation, LocalOnly, NonBuffer, PriorityCooperation, SimConfig, run_simulation
from cloudcoop.statespace import build_generator, count_queue_vectors
from cloudcoop.stationary import erlang_b, solve_stationary
from cloudcoop.success import analytic_success, best_fcfs_threshold
from conftest import ACCEPTANCE_LINES, brute_force_generator, lstsq_stationary

ARTIFACTS = Path(__file__).parent / "artifacts"
TASKS = 1_000_000


def record(k, ok, detail, elapsed, budget):
    within = elapsed < budget
    verdict = "PASS" if ok and within else "FAIL"
    line = f"CRITERION {k}: {verdict} - {detail} ({elapsed:.1f}s, budget {budget:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


def info(text):
    ACCEPTANCE_LINES.append(f"    INFO: {text}")
    print(f"INFO: {text}")


def noise(a, b):
    return math.hypot(a.total_ci_halfwidth, b.total_ci_halfwidth)


@pytest.fixture(scope="module")
def c10_sweep():
    """Coordinate-search thresholds for C=10 over the default load grid."""
    base = reference_scenario(10)
    start = time.perf_counter()
    points = []
    for lam in default_grid(base):
        cfg = base.with_total_rate(lam)
        points.append((lam, cfg, find_local_optimal(cfg)))
    return {"points": points, "elapsed": time.perf_counter() - start, "pool_rate": base.pool_rate}


def test_criterion_1_erlang_b():
    start = time.perf_counter()
    worst = 0.0
    for c in (1, 2, 5, 10):
        for a in (0.5, 1.0, 5.0, 9.0):
            cfg = SystemConfig((TaskClassSpec(a * 0.1, 50.0),), c, 0.1, (0,))
            dist = solve_stationary(build_generator(cfg))
            worst = max(worst, abs(dist[(c, 0)] - erlang_b(c, a)))
    record(1, worst <= 1e-9, f"16 cases, max |pi_block - ErlangB| = {worst:.2e} (tol 1e-9)",
           time.perf_counter() - start, 1)


def _random_chain(rng):
    while True:
        n = int(rng.integers(1, 4))
        c = int(rng.integers(1, 5))
        b = tuple(sorted(int(x) for x in rng.integers(0, 9, n)))
        if c + count_queue_vectors(b) > 200:
            continue
        rates = rng.uniform(0.02, 0.6, n)
        classes = tuple(TaskClassSpec(float(r), 10.0 * (i + 1)) for i, r in enumerate(rates))
        return SystemConfig(classes, c, float(rng.uniform(0.05, 0.5)), b)


def test_criterion_2_brute_force_chain():
    start = time.perf_counter()
    rng = np.random.default_rng(20240602)
    worst = 0.0
    sizes = []
    for _ in range(20):
        cfg = _random_chain(rng)
        _, Q = brute_force_generator(cfg)
        want = lstsq_stationary(Q)
        sizes.append(len(want))
        gen = build_generator(cfg)
        for method in ("sparse", "iterative"):
            got = solve_stationary(gen, method=method).probabilities
            worst = max(worst, float(np.abs(got - want).max()))
    record(2, worst <= 1e-9, f"20 chains of {min(sizes)}..{max(sizes)} states, sparse and iterative vs dense "
                             f"lstsq: max entry error {worst:.2e} (tol 1e-9)", time.perf_counter() - start, 10)


def test_criterion_3_busy_period_numerics():
    start = time.perf_counter()
    problems = []
    worst = {"mass": 0.0, "mean": 0.0, "lst": 0.0}
    for lam, c, mu in ((0.05, 1, 0.1), (0.5, 10, 0.1), (0.15, 2, 0.1), (0.8, 10, 0.1)):
        f = busy_period_pdf(lam, c, mu)
        mean = 1.0 / (c * mu - lam)
        worst["mass"] = max(worst["mass"], abs(f.mass - 1))
        worst["mean"] = max(worst["mean"], abs(f.mean() - mean) / mean)
        for s in (0.001, 0.01, 0.05, 0.1, 0.5):
            worst["lst"] = max(worst["lst"], abs(f.laplace(s) - busy_period_lst(lam, c, mu, s)))
    if worst["mass"] > 1e-3:
        problems.append("mass")
    if worst["mean"] > 0.01:
        problems.append("mean")
    if worst["lst"] > 1e-3:
        problems.append("transform")
    record(3, not problems, f"4 pools x 5 s-points: mass err {worst['mass']:.1e}, mean rel err {worst['mean']:.1e}, "
                            f"transform err {worst['lst']:.1e} (tols 1e-3, 1%, 1e-3)", time.perf_counter() - start, 5)


def test_criterion_4_convolution():
    start = time.perf_counter()
    f = busy_period_pdf(0.0, 2, 0.1, horizon=300.0)
    w = waiting_time_density(f, 2)
    rate = 0.2
    erlang2 = rate * rate * w.t * np.exp(-rate * w.t)
    erl = float(np.abs(w.values - erlang2).max())
    g = busy_period_pdf(0.4, 10, 0.1, horizon=400.0)
    semi = 0.0
    for a, b in ((1, 1), (2, 3), (5, 7)):
        lhs = waiting_time_density(g, a + b).values
        rhs = trapezoid_convolve(waiting_time_density(g, a).values, waiting_time_density(g, b).values, g.dt)
        semi = max(semi, float(np.abs(lhs - rhs).max()))
    record(4, erl <= 1e-3 and semi <= 1e-3,
           f"Erlang-2 sup err {erl:.1e}, semigroup sup err {semi:.1e} (tol 1e-3)", time.perf_counter() - start, 5)


def test_criterion_5_analytic_vs_simulation():
    start = time.perf_counter()
    ok = True
    notes = []
    for frac in (0.4, 0.7, 0.9):
        cfg = reference_scenario(2, frac * 0.2, (1, 2))
        rep = run_simulation(SimConfig(cfg, PriorityCooperation(), tasks=TASKS, seed=5, record_occupancy=True))
        dist = solve_stationary(build_generator(cfg))
        worst_z = 0.0
        for state, p in zip(dist.index.states, dist.probabilities):
            est = rep.occupancy_of(state.as_tuple())
            gap = abs(est.fraction - p)
            if gap > 3 * est.halfwidth:
                ok = False
            worst_z = max(worst_z, gap / est.halfwidth if est.halfwidth else math.inf)
        ana = analytic_success(cfg)
        gaps = []
        for i, (s, hw, a) in enumerate(zip(rep.per_class_success, rep.ci_halfwidth, ana.per_class_success)):
            gaps.append(abs(s - a))
            if abs(s - a) > max(0.02, 3 * hw):
                ok = False
                info(f"load {frac}: class {i + 1} gap {s - a:+.4f}; offload sim {rep.offload_fraction[i]:.4f} vs "
                     f"analytic {ana.offload_fraction[i]:.4f}")
        notes.append(f"{frac}: occ worst {worst_z:.2f} hw, success gap {max(gaps):.1e}")
    record(5, ok, "C=2 B=(1,2), 1e6 tasks; " + "; ".join(notes), time.perf_counter() - start, 120)


def test_criterion_6_priority_vs_local_only(c10_sweep):
    start = time.perf_counter()
    ok = True
    diffs = []
    points = c10_sweep["points"]
    for idx, (lam, cfg, search) in enumerate(points):
        seed = point_seed(0, idx)
        prio = run_simulation(SimConfig(cfg.with_thresholds(search.thresholds), PriorityCooperation(), TASKS, seed=seed))
        local = run_simulation(SimConfig(cfg, LocalOnly(), TASKS, seed=seed))
        d, n = prio.total_success - local.total_success, noise(prio, local)
        diffs.append(d)
        if d < -n:
            ok = False
        if idx == len(points) - 1 and d - n < 0.15:
            ok = False
        if local.unstable:
            info(f"LocalOnly flagged unstable at lambda={lam:.3g}")
    detail = (f"C=10, 1e6 tasks, gap at heaviest load {diffs[-1]:.4f} (need >= 0.15 beyond noise), "
              f"min gap {min(diffs):+.1e}")
    record(6, ok, detail, time.perf_counter() - start, 300)


def test_criterion_7_fig6_ordering(c10_sweep):
    start = time.perf_counter()
    ok = True
    notes = []
    pool = c10_sweep["pool_rate"]
    for idx, (lam, cfg, search) in enumerate(c10_sweep["points"]):
        if lam < 0.9 * pool:
            continue
        seed = point_seed(0, idx)
        b, _, _ = best_fcfs_threshold(cfg)
        prio = run_simulation(SimConfig(cfg.with_thresholds(search.thresholds), PriorityCooperation(), TASKS, seed=seed))
        fcfs = run_simulation(SimConfig(cfg, FcfsCooperation(b), TASKS, seed=seed))
        nb = run_simulation(SimConfig(cfg, NonBuffer(), TASKS, seed=seed))
        g1, g2 = prio.total_success - fcfs.total_success, fcfs.total_success - nb.total_success
        if g1 <= noise(prio, fcfs) or g2 <= noise(fcfs, nb):
            ok = False
        notes.append(f"{lam / pool:.2f}Cmu: P-F {g1:+.4f}, F-N {g2:+.4f}")
    record(7, ok, "1e6 tasks; " + "; ".join(notes), time.perf_counter() - start, 600)


def _unimodal_interior(xs):
    peak = int(np.argmax(xs))
    rises = all(b >= a for a, b in zip(xs[: peak + 1], xs[1: peak + 1]))
    falls = all(b <= a for a, b in zip(xs[peak:], xs[peak + 1:]))
    return 0 < peak < len(xs) - 1 and xs[peak] > xs[0] and xs[peak] > xs[-1] and rises and falls


def test_criterion_8_fig7_shape(c10_sweep):
    start = time.perf_counter()
    points = c10_sweep["points"]
    b1 = [p[2].thresholds[0] for p in points]
    b2 = [p[2].thresholds[1] for p in points]
    heavy = b1[len(b1) // 2:]
    b2_ok = _unimodal_interior(b2)
    b1_ok = all(b <= a for a, b in zip(heavy, heavy[1:]))
    for j in range(len(b1) // 2 + 1, len(b1)):
        if b1[j] > b1[j - 1]:
            lam, cfg, search = points[j]
            f = success_objective(cfg)
            alt = (b1[j - 1], search.thresholds[1])
            info(f"B_1 rises {b1[j - 1]}->{b1[j]} at lambda={lam:.3g}; total success at B={alt} differs from the "
                 f"found optimum by {f(alt) - search.total_success:+.2e}")
    small = reference_scenario(2)
    small_b1 = [find_local_optimal(small.with_total_rate(lam)).thresholds[0] for lam in default_grid(small)]
    info(f"C=2 sweep B_1 = {small_b1}")
    elapsed = c10_sweep["elapsed"] + time.perf_counter() - start
    record(8, b1_ok and b2_ok, f"C=10 B_2 = {b2} unimodal={b2_ok}; heavy-half B_1 = {heavy} nonincreasing={b1_ok}",
           elapsed, 600)


def _search_instance(rng, n):
    while True:
        # three-class boxes grow cubically, so those instances stay on one or two servers
        c = int(rng.integers(1, 4 if n < 3 else 3))
        pool = 0.1 * c
        bounds = sorted(float(x) for x in rng.uniform(20.0, 300.0, n))
        load = float(rng.uniform(0.3, 1.2) if n < 3 else rng.uniform(0.45, 0.8)) * pool
        mix = rng.dirichlet(np.full(n, 2.0))
        rates = load * mix
        if n > 1 and rates[:-1].sum() > 0.7 * pool:
            continue
        classes = tuple(TaskClassSpec(float(r), t) for r, t in zip(rates, bounds))
        return SystemConfig(classes, c, 0.1, ())


class _Redraw(Exception):
    pass


# chains above this size make one exhaustive box cost minutes
SEARCH_STATE_CAP = 5000


def test_criterion_9_local_vs_exhaustive():
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    counterexamples, unverified = [], []
    redrawn = 0
    k = 0
    while k < 30:
        n = 1 + k % 3
        cfg = _search_instance(rng, n)
        fn = success_objective(cfg)
        cache = {}

        def shared(b, fn=fn, cache=cache, servers=cfg.servers):
            if b not in cache:
                if servers + count_queue_vectors(b) > SEARCH_STATE_CAP:
                    raise _Redraw
                cache[b] = fn(b)
            return cache[b]

        try:
            local = find_local_optimal(n_classes=n, objective=shared)
            caps = tuple(b + max(4, math.ceil(0.3 * b)) for b in local.thresholds)
            for _ in range(3):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", CapBoundaryWarning)
                    ex = exhaustive_search(caps=caps, objective=shared)
                if not ex.at_cap:
                    break
                caps = tuple(math.ceil(1.5 * c) for c in caps)
        except _Redraw:
            redrawn += 1
            continue
        if ex.at_cap:
            unverified.append(k)
        gap = ex.total_success - local.total_success
        if abs(gap) > 1e-12:
            counterexamples.append({"instance": k, "servers": cfg.servers,
                                    "rates": list(cfg.arrival_rates), "bounds": list(cfg.delay_bounds),
                                    "local": list(local.thresholds), "exhaustive": list(ex.thresholds),
                                    "gap": gap})
        k += 1
    ARTIFACTS.mkdir(exist_ok=True)
    path = ARTIFACTS / "search_counterexamples.json"
    path.write_text(json.dumps(counterexamples, indent=2) + "\n")
    ok = not unverified
    detail = (f"30 instances N in 1..3: {30 - len(counterexamples)} equal within 1e-12, "
              f"{len(counterexamples)} counterexamples captured in {path.name}; "
              f"{redrawn} draws above {SEARCH_STATE_CAP} states replaced")
    if unverified:
        detail += f"; exhaustive box still binding for instances {unverified}"
    record(9, ok, detail, time.perf_counter() - start, 900)


def test_criterion_10_determinism(tmp_path):
    start = time.perf_counter()
    argv = ["--servers", "2", "--grid", "0.05:0.25:3", "--tasks", "20000", "--seed", "123"]
    codes = [main([*argv, "--out", str(tmp_path / run)]) for run in ("a", "b")]
    names = ("fig5.csv", "fig6.csv", "fig7.csv")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in names)
    record(10, codes == [0, 0] and same, f"two CLI runs, exit codes {codes}, {len(names)} CSVs byte-identical={same}",
           time.perf_counter() - start, 60)
