"""Observation functions and delay-coordinate neighbor smoothing.

An observation model error estimate at step k is a weighted average of raw
residuals over the nearest neighbors of the delay vector

    z_k = [y_k, y_{k-1}, ..., y_{k-d}]

with kernel weights

    w_j = exp(-dist_j / sigma) / sum_i exp(-dist_i / sigma),

where sigma is half the mean distance of the N neighbors.  Neighbor search is
exact Euclidean; ties are broken by the smaller time index, except that a
query point always ranks itself first among exact zero-distance duplicates so
each indexed point is its own nearest neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import ObservationSeries
from .errors import (
    DimensionMismatchError,
    InsufficientDataError,
    InvalidArgumentError,
)
from .serialize import read_csv, write_csv

SIGMA_FLOOR = 1e-12


class ObservationFunction:
    """Base class: a map from state space R^n to observation space R^m.

    Subclasses implement ``__call__`` vectorized over leading axes.  The
    ``at_step`` hook exists so time-dependent corrected functions can be bound
    to a filter step; plain functions return themselves.
    """

    kind = "custom"
    dim_in: int
    dim_out: int

    def at_step(self, k: int):
        return self

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim_in:
            raise DimensionMismatchError(
                f"input has dimension {x.shape[-1]}, function expects {self.dim_in}"
            )
        return x


class IdentityObservation(ObservationFunction):
    kind = "identity"

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidArgumentError("dimension must be positive")
        self.dim_in = dim
        self.dim_out = dim

    def __call__(self, x):
        return self._check(x).copy()

    def describe(self) -> str:
        return "identity"


_COMPONENT_MAPS = {
    "identity": lambda c, p: c,
    "sin": lambda c, p: np.sin(c),
    "cos": lambda c, p: np.cos(c),
    "shift": lambda c, p: c + p,
    "scale": lambda c, p: c * p,
}


class ComponentwiseObservation(ObservationFunction):
    """Elementary map applied to each state component independently.

    Parameters
    ----------
    maps : sequence of (name, param)
        One entry per component; names from ``identity``, ``sin``, ``cos``,
        ``shift`` (adds param), ``scale`` (multiplies by param).
    """

    kind = "componentwise_nonlinear"

    def __init__(self, maps):
        self.maps = [(str(n), None if p is None else float(p)) for n, p in maps]
        for name, _ in self.maps:
            if name not in _COMPONENT_MAPS:
                raise InvalidArgumentError(f"unknown componentwise map {name!r}")
        self.dim_in = len(self.maps)
        self.dim_out = len(self.maps)

    def __call__(self, x):
        x = self._check(x)
        out = np.empty_like(x)
        for i, (name, p) in enumerate(self.maps):
            out[..., i] = _COMPONENT_MAPS[name](x[..., i], p)
        return out

    def describe(self) -> str:
        return ",".join(n if p is None else f"{n}:{p:g}" for n, p in self.maps)


class LinearObservation(ObservationFunction):
    """y = C x for a fixed m-by-n matrix C."""

    kind = "linear_matrix"

    def __init__(self, matrix: np.ndarray):
        c = np.asarray(matrix, dtype=float)
        if c.ndim != 2:
            raise InvalidArgumentError("observation matrix must be 2-d")
        self.matrix = c
        self.dim_in = c.shape[1]
        self.dim_out = c.shape[0]

    def __call__(self, x):
        return self._check(x) @ self.matrix.T

    def describe(self) -> str:
        return f"linear_matrix({self.dim_out}x{self.dim_in})"


class CustomObservation(ObservationFunction):
    kind = "custom"

    def __init__(self, fn, dim_in: int, dim_out: int, name: str = "custom"):
        self.fn = fn
        self.dim_in = dim_in
        self.dim_out = dim_out
        self.name = name

    def __call__(self, x):
        return np.asarray(self.fn(self._check(x)), dtype=float)

    def describe(self) -> str:
        return self.name


class _StepCorrectedFunction(ObservationFunction):
    """A base function plus the fixed correction row for one time step."""

    kind = "corrected"

    def __init__(self, base: ObservationFunction, offset: np.ndarray):
        self.base = base
        self.offset = offset
        self.dim_in = base.dim_in
        self.dim_out = base.dim_out

    def __call__(self, x):
        # the same offset is added for every ensemble member
        return self.base(x) + self.offset


class CorrectedObservationFunction(ObservationFunction):
    """Base observation function plus a per-step additive correction table.

    Evaluation requires binding a time step first (``at_step``): the
    correction depends on the step, not on the evaluated state, so every
    ensemble member at step k receives the identical offset b_k.
    """

    kind = "corrected"

    def __init__(self, base: ObservationFunction, correction: np.ndarray):
        b = np.asarray(correction, dtype=float)
        if b.ndim != 2 or b.shape[1] != base.dim_out:
            raise DimensionMismatchError(
                f"correction table must be (T, {base.dim_out})"
            )
        self.base = base
        self.correction = b
        self.dim_in = base.dim_in
        self.dim_out = base.dim_out

    def at_step(self, k: int):
        if not 0 <= k < len(self.correction):
            raise InvalidArgumentError(
                f"step {k} outside correction table of length {len(self.correction)}"
            )
        return _StepCorrectedFunction(self.base, self.correction[k])

    def __call__(self, x):
        raise InvalidArgumentError(
            "corrected observation function must be bound to a step via at_step"
        )


class DelayIndex:
    """Exact nearest-neighbor index over delay-coordinate vectors.

    Vectors exist for time steps k in [delays, T-1] (``valid_range``); earlier
    steps lack a full history.  Queries are by time step and return neighbor
    time steps.
    """

    def __init__(self, values: np.ndarray, delays: int):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise InvalidArgumentError("observed values must be (T, m)")
        if delays < 0:
            raise InvalidArgumentError("delays must be >= 0")
        T, m = values.shape
        if T <= delays:
            raise InsufficientDataError(
                f"need more than delays={delays} steps, got {T}"
            )
        self.delays = delays
        self.num_steps = T
        self.obs_dim = m
        P = T - delays
        vec = np.empty((P, m * (delays + 1)))
        for j in range(delays + 1):
            # block j holds y_{k-j}; most recent observation first
            vec[:, j * m : (j + 1) * m] = values[delays - j : T - j]
        self.vectors = vec
        self._tree = cKDTree(vec)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def valid_range(self) -> tuple[int, int]:
        return (self.delays, self.num_steps - 1)

    @property
    def size(self) -> int:
        return len(self.vectors)

    def query(self, k: int, num_neighbors: int) -> tuple[np.ndarray, np.ndarray]:
        """N nearest indexed time steps for the delay vector at step k.

        Returns
        -------
        (indices, distances) sorted by (distance, time index), the queried
        step itself first at distance zero.
        """
        lo, hi = self.valid_range
        if not lo <= k <= hi:
            raise InvalidArgumentError(f"step {k} outside valid range [{lo}, {hi}]")
        self._check_n(num_neighbors)
        idx, dist = self._query_rows(self.vectors[k - lo : k - lo + 1], num_neighbors,
                                     self_pos=np.array([k - lo]))
        return idx[0], dist[0]

    def neighbors_all(self, num_neighbors: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor time steps and kernel weights for every valid step.

        Computed once per (index, N) pair and cached; iterating schemes that
        reuse the index see identical arrays each time.
        """
        if num_neighbors not in self._cache:
            self._check_n(num_neighbors)
            idx, dist = self._query_rows(
                self.vectors, num_neighbors, self_pos=np.arange(self.size)
            )
            self._cache[num_neighbors] = (idx, neighbor_weights(dist))
        return self._cache[num_neighbors]

    def _check_n(self, n):
        if n < 1 or n > self.size:
            raise InvalidArgumentError(
                f"num_neighbors must be in [1, {self.size}], got {n}"
            )

    def _query_rows(self, rows, n, self_pos):
        P = self.size
        kq = min(n + 1, P)
        dist, pos = self._tree.query(rows, k=kq)
        dist = np.atleast_2d(dist)
        pos = np.atleast_2d(pos)
        if kq > n:
            tied = np.nonzero(dist[:, n - 1] >= dist[:, n])[0]
            dist = dist[:, :n].copy()
            pos = pos[:, :n].copy()
            # requery any row whose cut fell inside a tie group
            for r in tied:
                pos[r], dist[r] = self._expand_ties(rows[r], n, kq)
        order = self._tie_order(dist, pos, self_pos)
        pos = np.take_along_axis(pos, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        return pos + self.delays, dist

    def _tie_order(self, dist, pos, self_pos):
        not_self = (pos != self_pos[:, None]).astype(np.int8)
        # row-wise sort by distance, then self-priority, then time index
        return np.lexsort((pos, not_self, dist), axis=1)

    def _expand_ties(self, row, n, kq):
        P = self.size
        while True:
            kq = min(2 * kq, P)
            dist, pos = self._tree.query(row, k=kq)
            if kq == P or dist[n - 1] < dist[-1]:
                break
        keep = dist <= dist[n - 1]
        dist, pos = dist[keep], pos[keep]
        order = np.lexsort((pos, dist))[:n]
        return pos[order], dist[order]


def build_delay_index(series: ObservationSeries, delays: int) -> DelayIndex:
    """Delay-coordinate index over an observation series."""
    return DelayIndex(series.values, delays)


def knn_query(index: DelayIndex, k: int, num_neighbors: int):
    """Exact nearest neighbors of the delay vector at time step k."""
    return index.query(k, num_neighbors)


def neighbor_weights(distances: np.ndarray) -> np.ndarray:
    """Kernel weights from sorted neighbor distances; rows sum to one.

    sigma is half the mean distance of the row; rows whose sigma falls below
    1e-12 (in particular all-zero rows) get uniform weights.

    Parameters
    ----------
    distances : ndarray, shape (N,) or (..., N)

    Returns
    -------
    ndarray of the same shape.
    """
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise InvalidArgumentError("need at least one distance")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InvalidArgumentError("distances must be finite and non-negative")
    single = d.ndim == 1
    if single:
        d = d[None, :]
    sigma = 0.5 * d.mean(axis=-1, keepdims=True)
    safe = np.maximum(sigma, SIGMA_FLOOR)
    w = np.exp(-d / safe)
    uniform = sigma[..., 0] < SIGMA_FLOOR
    w[uniform] = 1.0
    w /= w.sum(axis=-1, keepdims=True)
    return w[0] if single else w


def smooth_residuals(
    index: DelayIndex, raw: np.ndarray, num_neighbors: int
) -> np.ndarray:
    """Kernel-weighted neighbor average of raw residuals.

    Rows before the first valid step have no delay vector and get a zero
    correction.  Row k of the result is sum_j w_j raw[k_j] over the N
    neighbors of step k.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] != index.num_steps:
        raise DimensionMismatchError(
            f"raw residuals must be ({index.num_steps}, m)"
        )
    nb, w = index.neighbors_all(num_neighbors)
    out = np.zeros_like(raw)
    lo = index.delays
    chunk = max(1, 4_000_000 // (num_neighbors * raw.shape[1] + 1))
    for s in range(0, index.size, chunk):
        e = min(s + chunk, index.size)
        out[lo + s : lo + e] = np.einsum(
            "pn,pnm->pm", w[s:e], raw[nb[s:e]], optimize=True
        )
    return out


class LocalizedDelayIndex:
    """Per-node delay indexes over ring neighborhoods of a cyclic lattice.

    Node i's index is built from the scalar series of nodes i-1, i, i+1
    (cyclic), so local delay vectors have dimension 3 (delays + 1).  Column i
    of a residual field is smoothed with node i's own index.
    """

    def __init__(self, values: np.ndarray, delays: int):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] < 3:
            raise InvalidArgumentError("ring localization needs at least 3 nodes")
        self.num_steps, self.num_nodes = values.shape
        self.delays = delays
        self.indexes = []
        for i in range(self.num_nodes):
            ring = values[:, [(i - 1) % self.num_nodes, i, (i + 1) % self.num_nodes]]
            self.indexes.append(DelayIndex(ring, delays))

    @property
    def valid_range(self) -> tuple[int, int]:
        return self.indexes[0].valid_range

    @property
    def size(self) -> int:
        return self.indexes[0].size

    def neighbors_all(self, num_neighbors: int):
        """Stacked per-node neighbor lists and weights, shape (K, P, N)."""
        nbs, ws = [], []
        for idx in self.indexes:
            nb, w = idx.neighbors_all(num_neighbors)
            nbs.append(nb.astype(np.int32))
            ws.append(w)
        return np.stack(nbs), np.stack(ws)


def localized_smooth(
    index: LocalizedDelayIndex, raw: np.ndarray, num_neighbors: int
) -> np.ndarray:
    """Per-node kernel smoothing: column i averaged over node i's neighbors."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (index.num_steps, index.num_nodes):
        raise DimensionMismatchError(
            f"raw residuals must be ({index.num_steps}, {index.num_nodes})"
        )
    out = np.zeros_like(raw)
    lo = index.delays
    for i, idx in enumerate(index.indexes):
        nb, w = idx.neighbors_all(num_neighbors)
        out[lo:, i] = np.einsum("pn,pn->p", w, raw[:, i][nb])
    return out


@dataclass
class CorrectionTable:
    """Raw residuals and smoothed corrections for one loop iteration.

    ``raw`` rows outside the valid delay range are NaN (no delay vector
    exists there); ``smoothed`` rows outside it are zero.  Neighbor lists and
    weights are shared across iterations of a correction loop: they depend
    only on the observed series.
    """

    iteration: int
    raw: np.ndarray  # (T, m), NaN outside valid range
    smoothed: np.ndarray  # (T, m), zero outside valid range
    delays: int
    neighbors: Optional[np.ndarray] = None  # (P, N) or (K, P, N) time indices
    weights: Optional[np.ndarray] = None  # same shape as neighbors

    @property
    def valid_range(self) -> tuple[int, int]:
        return (self.delays, len(self.raw) - 1)


def write_correction_csv(path, table: CorrectionTable) -> None:
    T, m = table.raw.shape
    header = (
        ["k"]
        + [f"bhat_{i + 1}" for i in range(m)]
        + [f"b_{i + 1}" for i in range(m)]
    )
    cols = (
        [np.arange(T)]
        + [table.raw[:, i] for i in range(m)]
        + [table.smoothed[:, i] for i in range(m)]
    )
    write_csv(path, header, cols)


def read_correction_csv(path, iteration: int = 0) -> CorrectionTable:
    header, data = read_csv(path)
    m = (len(header) - 1) // 2
    raw = data[:, 1 : 1 + m]
    smoothed = data[:, 1 + m :]
    # absent rows are stored NaN; infer the delay count from them
    absent = np.nonzero(np.isnan(raw[:, 0]))[0]
    delays = int(absent[-1]) + 1 if len(absent) else 0
    return CorrectionTable(
        iteration=iteration, raw=raw, smoothed=smoothed, delays=delays
    )


def write_neighbors_csv(path, neighbors: np.ndarray, delays: int) -> None:
    """Sidecar listing per-step neighbor time indices.

    Global lists (P, N) produce columns ``k, k_1..k_N``; per-node lists
    (K, P, N) add a leading ``node`` column.
    """
    nb = np.asarray(neighbors)
    with open(path, "w", newline="") as fh:
        if nb.ndim == 2:
            P, N = nb.shape
            fh.write("k," + ",".join(f"k_{j + 1}" for j in range(N)) + "\n")
            for p in range(P):
                fh.write(f"{p + delays}," + ",".join(map(str, nb[p])) + "\n")
        elif nb.ndim == 3:
            K, P, N = nb.shape
            fh.write("node,k," + ",".join(f"k_{j + 1}" for j in range(N)) + "\n")
            for i in range(K):
                for p in range(P):
                    fh.write(f"{i},{p + delays}," + ",".join(map(str, nb[i, p])) + "\n")
        else:
            raise InvalidArgumentError("neighbor lists must be (P, N) or (K, P, N)")
