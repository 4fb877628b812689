"""State enumeration and generator construction for the threshold-gated priority chain.

States are ``(s, 0, ..., 0)`` for ``s < C`` followed by every ``(C, l_1, ..., l_N)``
with cumulative queue lengths ``L_i <= B_i``. Order is s-major, then
lexicographic in ``l``.

A class-j arrival to a full pool joins its sub-queue unless some cumulative
cap ``L_i = B_i`` with ``i >= j`` is binding, in which case it is sent to the
Internet cloud and produces no local transition. A completion in a full pool
with a nonempty queue hands the server to the head of the highest-priority
nonempty sub-queue.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .domain import QueueState, SystemConfig

DEFAULT_STATE_CAP = 5_000_000


class StateSpaceTooLarge(RuntimeError):
    pass


def count_queue_vectors(thresholds: tuple[int, ...]) -> int:
    """Number of nonnegative ``l`` with cumulative sums ``L_i <= B_i``."""
    # counts[L] = number of prefixes with cumulative sum exactly L
    counts = [1]
    for b in thresholds:
        prefix = list(itertools.accumulate(counts))
        counts = [prefix[min(L, len(prefix) - 1)] for L in range(b + 1)]
    return sum(counts)


def _queue_vectors(thresholds: tuple[int, ...]) -> np.ndarray:
    """Feasible queue vectors in lexicographic order, as an ``(m, N)`` array."""
    rows = np.zeros((1, 0), dtype=np.int64)
    used = np.zeros(1, dtype=np.int64)
    for i, b in enumerate(thresholds):
        room = b - used
        reps = room + 1
        parent = np.repeat(np.arange(len(rows)), reps)
        # 0..room[k] for each parent row k, parents kept in order
        starts = np.repeat(np.cumsum(reps) - reps, reps)
        x = np.arange(len(parent)) - starts
        rows = np.column_stack([rows[parent], x])
        used = used[parent] + x
    return rows


@dataclass(frozen=True, eq=False)
class StateIndex:
    """Dense bijection between states and integer ids, backed by an array of ``(s, l_1, ..., l_N)``."""

    array: np.ndarray
    servers: int

    def __post_init__(self) -> None:
        self.array.setflags(write=False)
        radix = int(self.array.max(initial=0)) + 1
        weights = radix ** np.arange(self.array.shape[1] - 1, -1, -1, dtype=np.int64)
        keys = self.array @ weights
        if np.any(np.diff(keys) <= 0):
            raise ValueError("states must be unique and in s-major lexicographic order")
        object.__setattr__(self, "_weights", weights)
        object.__setattr__(self, "_radix", radix)
        object.__setattr__(self, "keys", keys)

    def __len__(self) -> int:
        return len(self.array)

    @cached_property
    def states(self) -> tuple[QueueState, ...]:
        return tuple(QueueState(int(r[0]), tuple(int(x) for x in r[1:])) for r in self.array)

    def lookup(self, rows: np.ndarray) -> np.ndarray:
        """Ids of the states in ``rows``; -1 where a row is not in the space."""
        rows = np.atleast_2d(rows)
        inside = np.all((rows >= 0) & (rows < self._radix), axis=1)
        keys = np.where(inside, rows @ self._weights, -1)
        pos = np.clip(np.searchsorted(self.keys, keys), 0, len(self.keys) - 1)
        return np.where(inside & (self.keys[pos] == keys), pos, -1)

    def index(self, state: QueueState | tuple[int, ...]) -> int:
        key = state.as_tuple() if isinstance(state, QueueState) else tuple(state)
        k = int(self.lookup(np.array(key, dtype=np.int64))[0])
        if k < 0:
            raise KeyError(key)
        return k

    def state_of(self, idx: int) -> QueueState:
        r = self.array[idx]
        return QueueState(int(r[0]), tuple(int(x) for x in r[1:]))

    def __contains__(self, state) -> bool:
        key = state.as_tuple() if isinstance(state, QueueState) else tuple(state)
        return int(self.lookup(np.array(key, dtype=np.int64))[0]) >= 0

    def as_array(self) -> np.ndarray:
        """``(n_states, 1 + N)`` integer array of ``(s, l_1, ..., l_N)``."""
        return self.array


def _check_states(cfg: SystemConfig, arr: np.ndarray) -> None:
    s, l = arr[:, 0], arr[:, 1:]
    assert np.all((s >= 0) & (s <= cfg.servers)) and np.all(l >= 0)
    assert not np.any((s < cfg.servers) & l.any(axis=1)), "task waiting while a server idles"
    assert np.all(np.cumsum(l, axis=1) <= np.asarray(cfg.thresholds)), "cumulative cap exceeded"


def enumerate_states(cfg: SystemConfig, cap: int = DEFAULT_STATE_CAP) -> StateIndex:
    n = cfg.n_classes
    total = cfg.servers + count_queue_vectors(cfg.thresholds)
    if total > cap:
        raise StateSpaceTooLarge(f"state space too large: {total} states exceeds cap {cap}")
    idle = np.zeros((cfg.servers, n + 1), dtype=np.int64)
    idle[:, 0] = np.arange(cfg.servers)
    queues = _queue_vectors(cfg.thresholds)
    full = np.column_stack([np.full(len(queues), cfg.servers, dtype=np.int64), queues])
    arr = np.vstack([idle, full])
    _check_states(cfg, arr)
    return StateIndex(arr, cfg.servers)


def admits(cfg: SystemConfig, state: QueueState, class_index: int) -> bool:
    """True if a class ``class_index`` (1-based) arrival is served locally in ``state``."""
    if state.busy_servers < cfg.servers:
        return True
    cum = state.cumulative()
    return all(cum[i] < cfg.thresholds[i] for i in range(class_index - 1, cfg.n_classes))


def admission_matrix(cfg: SystemConfig, index: StateIndex) -> np.ndarray:
    """Boolean ``(n_states, N)`` array: entry ``[k, i]`` is True if class i+1 is admitted in state k."""
    arr = index.as_array()
    full = arr[:, 0] == cfg.servers
    cum = np.cumsum(arr[:, 1:], axis=1)
    room = cum < np.asarray(cfg.thresholds)[None, :]
    # class i admitted iff every cap j >= i has room: reverse cumulative AND
    tail_room = np.flip(np.logical_and.accumulate(np.flip(room, axis=1), axis=1), axis=1)
    return ~full[:, None] | tail_room


@dataclass(frozen=True, eq=False)
class Generator:
    """Sparse CTMC generator over an enumerated state space."""

    Q: sp.csr_matrix
    index: StateIndex

    @property
    def dimension(self) -> int:
        return self.Q.shape[0]

    def dense(self) -> np.ndarray:
        return self.Q.toarray()

    def to_csv(self, path: str | Path) -> None:
        coo = self.Q.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "col_id", "rate"])
            for k in order:
                w.writerow([int(coo.row[k]), int(coo.col[k]), repr(float(coo.data[k]))])


def transitions(cfg: SystemConfig, state: QueueState):
    """Yield ``(target_state, rate)`` for every local transition out of ``state``.

    Reference implementation of the rules, one state at a time.
    """
    C = cfg.servers
    mu = cfg.service_rate
    s, l = state.busy_servers, state.queue_lengths
    for j, lam in enumerate(cfg.arrival_rates, start=1):
        if s < C:
            yield QueueState(s + 1, l), lam
        elif admits(cfg, state, j):
            nl = list(l)
            nl[j - 1] += 1
            yield QueueState(C, tuple(nl)), lam
    if s < C or not any(l):
        if s > 0:
            yield QueueState(s - 1, l), s * mu
    else:
        head = next(k for k, x in enumerate(l) if x > 0)
        nl = list(l)
        nl[head] -= 1
        yield QueueState(C, tuple(nl)), C * mu


def build_generator(cfg: SystemConfig, index: StateIndex | None = None) -> Generator:
    if index is None:
        index = enumerate_states(cfg)
    arr = index.as_array()
    n, width = arr.shape
    C, mu = cfg.servers, cfg.service_rate
    s, l = arr[:, 0], arr[:, 1:]
    full = s == C
    admitted = admission_matrix(cfg, index)
    rows, cols, vals = [], [], []
    ids = np.arange(n)

    for j, lam in enumerate(cfg.arrival_rates):
        target = arr.copy()
        target[~full, 0] += 1
        target[full, 1 + j] += 1
        ok = admitted[:, j]
        rows.append(ids[ok])
        cols.append(index.lookup(target[ok]))
        vals.append(np.full(ok.sum(), lam))

    waiting = l.any(axis=1) & full
    head = np.argmax(l > 0, axis=1)
    target = arr.copy()
    target[waiting, 1 + head[waiting]] -= 1
    target[~waiting, 0] -= 1
    ok = s > 0
    rows.append(ids[ok])
    cols.append(index.lookup(target[ok]))
    vals.append(np.where(waiting, C * mu, s * mu)[ok].astype(float))

    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    assert np.all(cols >= 0), "transition left the state space"
    off = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out = np.asarray(off.sum(axis=1)).ravel()
    Q = (off - sp.diags(out)).tocsr()
    Q.sort_indices()
    return Generator(Q, index)


def check_irreducible(gen: Generator) -> bool:
    """True iff the graph of positive off-diagonal rates is strongly connected."""
    adj = gen.Q.copy()
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj.data = (adj.data > 0).astype(np.int8)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1
