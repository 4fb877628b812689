"""Delay distributions: local service, busy periods, waiting and sojourn times, Internet delay.

All densities live on a uniform grid ``t_k = k * dt`` on ``[0, horizon]``.
Convolutions and cumulative integrals use the trapezoid rule with the
first Euler-Maclaurin endpoint correction, which keeps the per-fold error at
O(dt^4). Mass that falls beyond the horizon is reported as an error rather
than renormalized away.

The waiting time of a priority-i task that finds ``L_i`` tasks of priority
``<= i`` ahead of it in a full pool is the sum of ``L_i + 1`` busy periods of
the pool, seen as a single server of rate ``C * mu`` fed by the classes of
strictly higher priority.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.signal import fftconvolve

from .bessel import i1e
from .domain import InternetDelayParams, QueueState, SystemConfig, higher_priority_rate

DEFAULT_DT = 0.1
# dt * (fastest decay rate of the busy-period kernel) is kept below this
DT_RATE_PRODUCT = 0.15
MAX_LOST_MASS = 0.01


class UnstableBusyPeriod(ValueError):
    """Higher-priority load saturates the pool, so a busy period may never end."""


class HorizonOverflow(RuntimeError):
    """Too much probability mass lies beyond the grid horizon."""


@dataclass(frozen=True)
class GridSpec:
    """Time step and horizon (ms); ``None`` picks a default from the config."""

    dt: float | None = None
    horizon: float | None = None

    def resolve(self, cfg: SystemConfig) -> tuple[float, float]:
        dt = self.dt if self.dt is not None else default_dt(cfg)
        return dt, self.horizon if self.horizon is not None else default_horizon(cfg)


def default_dt(cfg: SystemConfig) -> float:
    """0.1 ms, shrunk when the pool is fast enough that 0.1 ms under-resolves the kernels."""
    lam = min(higher_priority_rate(cfg, cfg.n_classes), cfg.pool_rate)
    fastest = (math.sqrt(cfg.pool_rate) + math.sqrt(lam)) ** 2
    return min(DEFAULT_DT, DT_RATE_PRODUCT / fastest)


def default_horizon(cfg: SystemConfig) -> float:
    base = 5.0 * cfg.delay_bounds[-1]
    slack = cfg.pool_rate - higher_priority_rate(cfg, cfg.n_classes)
    if slack > 0:
        return max(base, 20.0 / slack)
    return base


@dataclass(frozen=True, eq=False)
class DensityGrid:
    dt: float
    values: np.ndarray

    @property
    def horizon(self) -> float:
        return self.dt * (len(self.values) - 1)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(len(self.values))

    @cached_property
    def cdf(self) -> np.ndarray:
        return cumulative_integral(self.values, self.dt)

    @property
    def mass(self) -> float:
        return float(self.cdf[-1])

    def mean(self) -> float:
        return float(cumulative_integral(self.t * self.values, self.dt)[-1])

    def cdf_at(self, t: float) -> float:
        return float(np.interp(t, self.t, self.cdf))

    def laplace(self, s: float) -> float:
        """Numeric Laplace transform ``int exp(-s t) f(t) dt`` over the grid."""
        return float(cumulative_integral(np.exp(-s * self.t) * self.values, self.dt)[-1])

    def lost_mass(self) -> float:
        return 1.0 - self.mass


def _grid(dt: float, horizon: float) -> np.ndarray:
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be positive")
    return dt * np.arange(int(round(horizon / dt)) + 1)


def _derivative(v: np.ndarray, dt: float) -> np.ndarray:
    """Fourth-order finite-difference derivative (five-point stencils, one-sided at the ends)."""
    n = len(v)
    if n < 5:
        return np.gradient(v, dt, edge_order=2) if n > 2 else np.gradient(v, dt) if n == 2 else np.zeros(n)
    d = np.empty(n)
    d[2:-2] = (v[:-4] - 8.0 * v[1:-3] + 8.0 * v[3:-1] - v[4:]) / (12.0 * dt)
    d[0] = (-25.0 * v[0] + 48.0 * v[1] - 36.0 * v[2] + 16.0 * v[3] - 3.0 * v[4]) / (12.0 * dt)
    d[1] = (-3.0 * v[0] - 10.0 * v[1] + 18.0 * v[2] - 6.0 * v[3] + v[4]) / (12.0 * dt)
    d[-1] = (25.0 * v[-1] - 48.0 * v[-2] + 36.0 * v[-3] - 16.0 * v[-4] + 3.0 * v[-5]) / (12.0 * dt)
    d[-2] = (3.0 * v[-1] + 10.0 * v[-2] - 18.0 * v[-3] + 6.0 * v[-4] - v[-5]) / (12.0 * dt)
    return d


def cumulative_integral(v: np.ndarray, dt: float) -> np.ndarray:
    """Endpoint-corrected cumulative trapezoid ``int_0^{t_k} v``."""
    dv = _derivative(v, dt)
    out = cumulative_trapezoid(v, dx=dt, initial=0.0) - dt * dt / 12.0 * (dv - dv[0])
    # the correction may wiggle by round-off where v is ~0
    return np.maximum.accumulate(out)


def trapezoid_convolve(a: np.ndarray, b: np.ndarray, dt: float, n: int | None = None) -> np.ndarray:
    """Endpoint-corrected trapezoid ``(a * b)(t_k)`` for the first ``n`` grid points."""
    if n is None:
        n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    da, db = _derivative(a, dt), _derivative(b, dt)
    full = fftconvolve(a, b)[:n]
    out = dt * (full - 0.5 * (a[0] * b + b[0] * a))
    # integrand u -> a(u) b(t - u); subtract dt^2/12 * (its slope at u=t minus at u=0)
    out -= dt * dt / 12.0 * ((da * b[0] - a * db[0]) - (da[0] * b - a[0] * db))
    # FFT round-off can leave tiny negative values in far tails
    np.maximum(out, 0.0, out=out)
    return out


def service_sojourn_cdf(mu: float, t):
    """P(service time <= t) for exponential service with rate ``mu``."""
    return -np.expm1(-mu * np.asarray(t, dtype=float)) if np.ndim(t) else -math.expm1(-mu * t)


def service_density(mu: float, dt: float, horizon: float) -> DensityGrid:
    t = _grid(dt, horizon)
    return DensityGrid(dt, mu * np.exp(-mu * t))


def _busy_period_values(lam: float, rate: float, t: np.ndarray) -> np.ndarray:
    if lam == 0.0:
        return rate * np.exp(-rate * t)
    rho = lam / rate
    root = math.sqrt(lam * rate)
    decay = (math.sqrt(rate) - math.sqrt(lam)) ** 2
    out = np.empty_like(t)
    pos = t > 0
    tp = t[pos]
    # e^{-(lam+rate)t} I1(2t*root) = e^{-decay*t} * i1e(2t*root)
    out[pos] = np.exp(-decay * tp) * i1e(2.0 * tp * root) / (tp * math.sqrt(rho))
    out[~pos] = rate
    return out


@lru_cache(maxsize=256)
def _busy_period_cached(lam: float, servers: int, mu: float, dt: float, horizon: float) -> DensityGrid:
    vals = _busy_period_values(lam, servers * mu, _grid(dt, horizon))
    vals.setflags(write=False)
    return DensityGrid(dt, vals)


def busy_period_pdf(Lambda_hp: float, C: int, mu: float, dt: float = DEFAULT_DT, horizon: float | None = None) -> DensityGrid:
    """Grid density of a busy period of the pool (rate ``C mu``) fed at rate ``Lambda_hp``.

    The default horizon is 200 mean busy periods, ``200 / (C mu - Lambda_hp)``.
    Raises UnstableBusyPeriod when ``Lambda_hp >= C mu``.
    """
    if Lambda_hp < 0 or C < 1 or mu <= 0:
        raise ValueError("need Lambda_hp >= 0, C >= 1, mu > 0")
    if Lambda_hp >= C * mu:
        raise UnstableBusyPeriod(f"higher-priority rate {Lambda_hp} >= pool rate {C * mu}")
    if horizon is None:
        horizon = 200.0 / (C * mu - Lambda_hp)
    return _busy_period_cached(float(Lambda_hp), int(C), float(mu), float(dt), float(horizon))


def busy_period_lst(Lambda_hp: float, C: int, mu: float, s):
    """Laplace-Stieltjes transform of the busy period; accepts real or complex ``s``."""
    rate = C * mu
    z = np.asarray(s) + Lambda_hp + rate
    root = np.sqrt(z * z - 4.0 * rate * Lambda_hp + 0j)
    # rationalized form of (z - root) / (2 Lambda): no cancellation as Lambda -> 0
    val = 2.0 * rate / (z + root)
    if np.ndim(val) == 0:
        val = complex(val)
        return val.real if np.isrealobj(s) and abs(val.imag) < 1e-15 else val
    return val.real if np.isrealobj(s) else val


def _check_mass(grid_values: np.ndarray, dt: float, folds: int) -> None:
    mass = float(cumulative_integral(grid_values, dt)[-1])
    if 1.0 - mass > MAX_LOST_MASS:
        raise HorizonOverflow(
            f"{folds}-fold waiting density keeps only {mass:.4f} of its mass on the grid; "
            f"increase the horizon beyond {dt * (len(grid_values) - 1):g} ms"
        )


def waiting_time_density(f: DensityGrid, folds: int) -> DensityGrid:
    """``folds``-fold self-convolution of ``f`` (no renormalization)."""
    if folds < 1:
        raise ValueError("folds must be >= 1")
    w = f.values
    for _ in range(folds - 1):
        w = trapezoid_convolve(w, f.values, f.dt)
    _check_mass(w, f.dt, folds)
    return DensityGrid(f.dt, w)


def sojourn_density(w: DensityGrid, mu: float) -> DensityGrid:
    g = mu * np.exp(-mu * w.t)
    return DensityGrid(w.dt, trapezoid_convolve(w.values, g, w.dt))


def _cdf_at(values: np.ndarray, dt: float, t: float) -> float:
    cdf = cumulative_integral(values, dt)
    return float(np.interp(t, dt * np.arange(len(values)), cdf))


@dataclass(eq=False)
class SojournTable:
    """Lazily extended ``P(W_{L+1} + S <= T)`` for ``L = 0, 1, ...``.

    Only the latest waiting density is kept; earlier folds would cost
    ``horizon / dt`` floats each.
    """

    Lambda_hp: float
    servers: int
    mu: float
    bound: float
    dt: float
    horizon: float
    _values: list = field(default_factory=list)
    _w: np.ndarray | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self) -> None:
        self._f = busy_period_pdf(self.Lambda_hp, self.servers, self.mu, self.dt, self.horizon)
        m = min(len(self._f.values), int(math.ceil(self.bound / self.dt)) + 2)
        self._m = m
        self._g = self.mu * np.exp(-self.mu * self.dt * np.arange(m))

    def _extend(self) -> None:
        f = self._f.values
        w = f if self._w is None else trapezoid_convolve(self._w, f, self.dt)
        _check_mass(w, self.dt, len(self._values) + 1)
        soj = trapezoid_convolve(w, self._g, self.dt, n=self._m)
        p = _cdf_at(soj, self.dt, self.bound)
        self._w = w
        self._values.append(min(max(p, 0.0), 1.0))

    def success(self, queued_ahead: int) -> float:
        """Success probability with ``queued_ahead`` tasks of priority <= i already waiting."""
        with self._lock:
            while len(self._values) <= queued_ahead:
                self._extend()
            return self._values[queued_ahead]

    def table(self, max_queued: int) -> np.ndarray:
        self.success(max_queued)
        return np.array(self._values[: max_queued + 1])


_TABLES: dict[tuple, SojournTable] = {}
_TABLES_LOCK = threading.Lock()
_TABLES_MAX = 512


def sojourn_table(Lambda_hp: float, servers: int, mu: float, bound: float, dt: float, horizon: float) -> SojournTable:
    key = (float(Lambda_hp), int(servers), float(mu), float(bound), float(dt), float(horizon))
    with _TABLES_LOCK:
        table = _TABLES.get(key)
        if table is None:
            if len(_TABLES) >= _TABLES_MAX:
                _TABLES.pop(next(iter(_TABLES)))
            table = _TABLES[key] = SojournTable(*key)
        return table


def class_sojourn_table(cfg: SystemConfig, class_index: int, grid: GridSpec | None = None, bound: float | None = None) -> SojournTable:
    dt, horizon = (grid or GridSpec()).resolve(cfg)
    if bound is None:
        bound = cfg.delay_bounds[class_index - 1]
    lam = higher_priority_rate(cfg, class_index)
    return sojourn_table(lam, cfg.servers, cfg.service_rate, bound, dt, horizon)


def sojourn_success_given_state(cfg: SystemConfig, state: QueueState, class_index: int, grid: GridSpec | None = None) -> float:
    """P(sojourn <= T_i) for a class-i task served locally after arriving in ``state``.

    ``state`` need not respect the thresholds (the Greedy policy queues without caps).
    """
    if not 1 <= class_index <= cfg.n_classes:
        raise ValueError(f"class index {class_index} out of range")
    bound = cfg.delay_bounds[class_index - 1]
    if state.busy_servers < cfg.servers:
        return float(service_sojourn_cdf(cfg.service_rate, bound))
    queued_ahead = sum(state.queue_lengths[:class_index])
    return class_sojourn_table(cfg, class_index, grid).success(queued_ahead)


def _hypoexp_cdf(a: float, b: float, t: np.ndarray) -> np.ndarray:
    """CDF of the sum of independent exponentials with means ``a`` and ``b``."""
    r1, r2 = 1.0 / a, 1.0 / b
    if abs(r1 - r2) <= 1e-9 * max(r1, r2):
        r = 0.5 * (r1 + r2)
        return -np.expm1(-r * t) - r * t * np.exp(-r * t)
    return 1.0 - (r2 * np.exp(-r1 * t) - r1 * np.exp(-r2 * t)) / (r2 - r1)


def internet_success(params: InternetDelayParams, t):
    """P(Internet delay <= t) for the exponential router/queue mixture."""
    arr = np.asarray(t, dtype=float)
    router = -np.expm1(-arr / params.router_mean)
    both = _hypoexp_cdf(params.router_mean, params.queue_mean, arr)
    out = np.clip(params.p * router + params.q * both, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sample_internet_delay(params: InternetDelayParams, rng: np.random.Generator, size: int) -> np.ndarray:
    router = rng.exponential(params.router_mean, size)
    queued = rng.random(size) >= params.p
    extra = rng.exponential(params.queue_mean, size)
    return router + np.where(queued, extra, 0.0)
