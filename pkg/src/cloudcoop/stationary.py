"""Stationary distribution of a finite irreducible CTMC, plus the Erlang-B oracle."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .statespace import Generator, StateIndex

DENSE_CAP = 2000
# "auto" switches to sparse LU above this size; dense LU is O(n^3)
AUTO_DENSE_MAX = 256
CLAMP_TOL = 1e-12
RESIDUAL_TOL = 1e-9


class StationarySolveError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


@dataclass(frozen=True)
class StationaryDistribution:
    probabilities: np.ndarray
    residual: float
    index: StateIndex | None = None
    method: str = ""

    def __len__(self) -> int:
        return len(self.probabilities)

    def __getitem__(self, state) -> float:
        if self.index is None:
            raise KeyError("distribution carries no state index")
        return float(self.probabilities[self.index.index(state)])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "probability"])
            for k, p in enumerate(self.probabilities):
                key = self.index.state_of(k).as_tuple() if self.index is not None else k
                w.writerow([str(key), repr(float(p))])


def _finalize(pi: np.ndarray, Q: sp.spmatrix, method: str, index) -> StationaryDistribution:
    if not np.all(np.isfinite(pi)):
        raise StationarySolveError(f"{method} solve produced non-finite values")
    if pi.min() < -CLAMP_TOL * max(1.0, pi.sum()):
        raise StationarySolveError(f"{method} solve produced negative mass {pi.min():.3e}", residual=float(pi.min()))
    pi = np.where(pi < 0.0, 0.0, pi)
    pi = pi / pi.sum()
    residual = float(np.abs(Q.T @ pi).max())
    if residual > RESIDUAL_TOL:
        raise StationarySolveError(f"{method} solve did not satisfy the balance equations", residual=residual)
    return StationaryDistribution(pi, residual, index, method)


def _unit_rhs(n: int) -> np.ndarray:
    b = np.zeros(n)
    b[-1] = 1.0
    return b


# The dense solver replaces the last balance equation with sum(pi) = 1.
def solve_dense(Q) -> np.ndarray:
    Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    n = Qd.shape[0]
    b = _unit_rhs(n)
    A = Qd.T.copy()
    A[-1, :] = 1.0
    try:
        return scipy.linalg.solve(A, b)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise StationarySolveError(f"dense solve failed: {exc}") from exc


def solve_sparse(Q) -> np.ndarray:
    """Sparse LU on the balance equations with ``pi_0`` pinned to 1, then normalized.

    A row of ones would make the factors dense, so the normalization is applied
    after the solve instead.
    """
    n = Q.shape[0]
    if n == 1:
        return np.ones(1)
    A = sp.csr_matrix(Q).T.tocsc()
    M = A[1:, 1:].tocsc()
    rhs = -A[1:, 0].toarray().ravel()
    try:
        with np.errstate(all="ignore"):
            y = spla.splu(M, permc_spec="MMD_AT_PLUS_A").solve(rhs)
    except RuntimeError as exc:
        raise StationarySolveError(f"sparse LU solve failed: {exc}") from exc
    x = np.concatenate([[1.0], y])
    if not np.all(np.isfinite(x)):
        raise StationarySolveError("sparse LU solve failed (singular system)")
    return x / x.sum()


def solve_gauss_seidel(Q, tol: float = 1e-12, max_sweeps: int = 200_000) -> np.ndarray:
    """Gauss-Seidel on the uniformized chain ``pi = pi (I + Q / gamma)``, one normalization per sweep.

    With ``gamma = 1.1 * max|Q_ii|`` the splitting of ``I - P`` into its lower and
    strictly upper parts equals that of ``-Q / gamma``, so gamma cancels from the
    sweep. Stops when the L1 change between sweeps is at most ``tol``.
    """
    QT = sp.csr_matrix(Q).T.tocsr()
    n = QT.shape[0]
    if np.any(QT.diagonal() >= 0):
        raise StationarySolveError("generator has a state with no outflow")
    lower = sp.tril(QT, format="csr")
    upper = sp.triu(QT, k=1, format="csr")
    pi = np.full(n, 1.0 / n)
    delta = float("inf")
    for _ in range(max_sweeps):
        new = spla.spsolve_triangular(lower, -(upper @ pi), lower=True)
        new /= new.sum()
        delta = float(np.abs(new - pi).sum())
        pi = new
        if delta <= tol:
            return pi
    raise StationarySolveError("Gauss-Seidel did not converge", residual=delta)


def solve_stationary(gen: Generator | sp.spmatrix | np.ndarray, method: str = "auto", dense_cap: int = DENSE_CAP) -> StationaryDistribution:
    """Unique stationary law of an irreducible generator.

    ``method`` is one of ``"auto"``, ``"dense"``, ``"sparse"`` (sparse LU) or
    ``"iterative"`` (Gauss-Seidel). ``"auto"`` solves densely up to
    ``AUTO_DENSE_MAX`` states and with sparse LU above; ``"dense"`` refuses
    more than ``dense_cap`` states.
    """
    if isinstance(gen, Generator):
        Q, index = gen.Q, gen.index
    else:
        Q, index = sp.csr_matrix(gen), None
    if method == "auto":
        method = "dense" if Q.shape[0] <= min(dense_cap, AUTO_DENSE_MAX) else "sparse"
    if method == "dense" and Q.shape[0] > dense_cap:
        raise ValueError(f"dense solve refused for {Q.shape[0]} states (cap {dense_cap})")
    solvers = {"dense": solve_dense, "sparse": solve_sparse, "iterative": solve_gauss_seidel}
    try:
        solver = solvers[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None
    if Q.shape[0] == 1:
        return StationaryDistribution(np.ones(1), 0.0, index, method)
    return _finalize(solver(Q), sp.csr_matrix(Q), method, index)


def erlang_b(servers: int, offered_load: float) -> float:
    """Erlang-B blocking probability via the stable recursion."""
    if servers < 1 or offered_load <= 0:
        raise ValueError("need servers >= 1 and offered_load > 0")
    b = 1.0
    for c in range(1, servers + 1):
        b = offered_load * b / (c + offered_load * b)
    return b


def erlang_b_direct(servers: int, offered_load: float) -> float:
    """Erlang-B from the truncated Poisson sum, in log space."""
    logs = [k * math.log(offered_load) - math.lgamma(k + 1) for k in range(servers + 1)]
    m = max(logs)
    return math.exp(logs[-1] - m) / math.fsum(math.exp(x - m) for x in logs)
