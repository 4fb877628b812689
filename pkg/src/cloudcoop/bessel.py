r"""Modified Bessel function of the first kind, order one.

``i1e(x) = exp(-x) * I_1(x)`` is evaluated from the ascending power series

.. math:: I_1(x) = \sum_{k\ge0} \frac{(x/2)^{2k+1}}{k!\,(k+1)!}

for ``x < 15`` and from the large-argument expansion

.. math:: I_1(x) \sim \frac{e^x}{\sqrt{2\pi x}} \sum_k (-1)^k \frac{a_k(1)}{x^k}

above, where the scaling keeps everything finite for arbitrarily large ``x``.
"""

from __future__ import annotations

import numpy as np

SERIES_CROSSOVER = 15.0
_SERIES_TERMS = 60
_ASYMPTOTIC_TERMS = 20


def _series(x: np.ndarray) -> np.ndarray:
    half = 0.5 * x
    q = half * half
    term = half.copy()
    total = term.copy()
    for k in range(_SERIES_TERMS):
        term = term * q / ((k + 1) * (k + 2))
        total = total + term
    return total


def _asymptotic_scaled(x: np.ndarray) -> np.ndarray:
    term = np.ones_like(x)
    total = term.copy()
    for k in range(1, _ASYMPTOTIC_TERMS + 1):
        # a_k / a_{k-1} = (4 nu^2 - (2k-1)^2) / (8k) with nu = 1, alternating sign
        term = -term * (4.0 - (2 * k - 1) ** 2) / (8.0 * k * x)
        total = total + term
    return total / np.sqrt(2.0 * np.pi * x)


def i1e(x):
    """Exponentially scaled ``I_1(x) * exp(-x)`` for ``x >= 0`` (array or scalar)."""
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr < 0):
        raise ValueError("i1e is only implemented for x >= 0")
    out = np.empty_like(arr)
    small = arr < SERIES_CROSSOVER
    if np.any(small):
        xs = arr[small]
        out[small] = _series(xs) * np.exp(-xs)
    if np.any(~small):
        out[~small] = _asymptotic_scaled(arr[~small])
    return float(out[0]) if scalar else out


def i1(x):
    """``I_1(x)`` for ``x >= 0``; overflows to inf beyond x ~ 713."""
    arr = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return i1e(arr) * np.exp(arr)
