"""Iterative correction of observation model error.

Observations are produced by a true map h while the filter assumes g.  Each
iteration runs the filter with the current corrected function, forms raw
residuals against the original assumed g,

    bhat_k = y_k - g(x_k),

smooths them over delay-coordinate neighbors into corrections b_k, and sets
g^(l+1) = g + b^(l).  The loop monitors

    delta_g = (1/T) sum_k sum_j |bhat_kj^(l) - bhat_kj^(l-1)|

and stops when it falls below a threshold or the iteration cap is reached.
Neighbor lists and weights depend only on the observed series; they are
computed once and reused verbatim by every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import lsqr

from .dynamics import ModelSpec, ObservationSeries, Trajectory, propagate_states
from .enkf import FilterConfig, FilterRun, run_filter
from .errors import (
    DimensionMismatchError,
    InvalidArgumentError,
    InvalidCovarianceError,
)
from .observation import (
    CorrectedObservationFunction,
    CorrectionTable,
    DelayIndex,
    LocalizedDelayIndex,
    ObservationFunction,
    localized_smooth,
    smooth_residuals,
)
from .serialize import write_csv

RIDGE = 1e-8


@dataclass
class OmecConfig:
    """Correction loop settings.

    Parameters
    ----------
    delays : int
        d; delay vectors span observations k, k-1, ..., k-d.
    num_neighbors : int
        N nearest neighbors averaged per step.
    max_iterations : int
        M; the loop runs filter passes 0..M inclusive (pass 0 is the
        uncorrected filter) unless it stops early.
    threshold : float or None
        Stop once delta_g falls below this; None selects
        1e-3 * mean |y| over the series.
    localization : str
        ``"none"`` for one global delay index, ``"ring3"`` for per-node
        indexes over each node and its two lattice neighbors.
    record_history : bool
        Keep every iteration's filter run and correction table (memory heavy
        for large models); scalar diagnostics are always kept.
    """

    delays: int = 2
    num_neighbors: int = 100
    max_iterations: int = 20
    threshold: Optional[float] = None
    localization: str = "none"
    record_history: bool = True

    def __post_init__(self):
        if self.delays < 0:
            raise InvalidArgumentError("delays must be >= 0")
        if self.num_neighbors < 1:
            raise InvalidArgumentError("num_neighbors must be >= 1")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if self.localization not in ("none", "ring3"):
            raise InvalidArgumentError(
                f"localization must be 'none' or 'ring3', got {self.localization!r}"
            )


@dataclass
class IterationRecord:
    """Scalars (always) and heavy artifacts (optional) for one iteration."""

    index: int
    delta_g: float  # NaN for iteration 0
    rmse: Optional[np.ndarray]  # per-component, when truth was given
    nll: Optional[float]
    r_trace_stable: float  # mean trace(R_k) over the last half of the run
    q_trace_stable: float
    filter_run: Optional[FilterRun] = None
    correction: Optional[CorrectionTable] = None


@dataclass
class OmecResult:
    """Outcome of a correction loop."""

    iterations: list  # IterationRecord, index 0 first
    final_run: FilterRun
    final_correction: CorrectionTable
    threshold: float
    stopped_early: bool
    first_raw: Optional[np.ndarray] = None  # iteration-0 raw residuals
    first_smoothed: Optional[np.ndarray] = None
    index: object = None  # the delay index shared by all iterations

    @property
    def delta_g(self) -> np.ndarray:
        return np.array([rec.delta_g for rec in self.iterations])

    @property
    def rmse(self) -> Optional[np.ndarray]:
        if self.iterations[0].rmse is None:
            return None
        return np.array([rec.rmse for rec in self.iterations])

    def corrected_function(self, base: ObservationFunction) -> CorrectedObservationFunction:
        return CorrectedObservationFunction(base, self.final_correction.smoothed)


def raw_residuals(
    observations: ObservationSeries,
    run: FilterRun,
    base_obs_fn: ObservationFunction,
) -> np.ndarray:
    """bhat_k = y_k - g(x_k^+) against the original assumed g.

    The base function is used regardless of any correction active during the
    filter pass; corrections are always expressed relative to g itself.
    """
    ys = np.asarray(observations.values, dtype=float)
    if len(ys) != len(run.posterior_means):
        raise DimensionMismatchError("observation and filter lengths differ")
    return ys - base_obs_fn(run.posterior_means)


def default_threshold(observations: ObservationSeries) -> float:
    return 1e-3 * float(np.mean(np.abs(observations.values)))


def _build_index(observations: ObservationSeries, config: OmecConfig):
    if config.localization == "ring3":
        return LocalizedDelayIndex(observations.values, config.delays)
    return DelayIndex(observations.values, config.delays)


def _smooth(index, raw, n_neighbors):
    if isinstance(index, LocalizedDelayIndex):
        return localized_smooth(index, raw, n_neighbors)
    return smooth_residuals(index, raw, n_neighbors)


def iterate(
    observations: ObservationSeries,
    model: ModelSpec,
    assumed_g: ObservationFunction,
    filter_config: FilterConfig,
    config: OmecConfig,
    truth: Optional[Trajectory] = None,
    nll_covs: Optional[tuple] = None,
    filter_fn: Callable = run_filter,
) -> OmecResult:
    """Run the correction loop.

    Parameters
    ----------
    truth : Trajectory, optional
        When given, per-component RMSE of each pass is recorded (twin
        experiments); never used by the algorithm itself.
    nll_covs : (Q, R), optional
        When given, the joint negative log likelihood of each pass is
        recorded under these covariances.
    filter_fn : callable
        Signature of :func:`omec.enkf.run_filter`; injectable for testing.

    Returns
    -------
    OmecResult
        Iteration 0 is always the uncorrected filter; delta_g is undefined
        (NaN) there, so at least two passes run before an early stop.
    """
    ys = np.asarray(observations.values, dtype=float)
    T = len(ys)
    index = _build_index(observations, config)
    nbs, wts = index.neighbors_all(config.num_neighbors)
    threshold = (
        default_threshold(observations) if config.threshold is None else config.threshold
    )
    lo = config.delays

    records = []
    prev_raw = None
    correction = None
    last_run = None
    last_table = None
    first_raw = None
    first_smoothed = None
    stopped = False
    for it in range(config.max_iterations + 1):
        if correction is None:
            obs_fn = assumed_g
        else:
            obs_fn = CorrectedObservationFunction(assumed_g, correction)
        run = filter_fn(observations, model, obs_fn, filter_config)
        raw = raw_residuals(observations, run, assumed_g)
        smoothed = _smooth(index, raw, config.num_neighbors)
        if it == 0:
            delta = float("nan")
        else:
            delta = float(np.abs(raw[lo:] - prev_raw[lo:]).sum() / T)
        stored_raw = raw.copy()
        stored_raw[:lo] = np.nan
        table = CorrectionTable(
            iteration=it,
            raw=stored_raw,
            smoothed=smoothed,
            delays=config.delays,
            neighbors=nbs,
            weights=wts,
        )
        half = T // 2
        rec = IterationRecord(
            index=it,
            delta_g=delta,
            rmse=_rmse_against(run, truth, config.delays) if truth is not None else None,
            nll=(
                negative_log_likelihood(run, table, observations, model, *nll_covs)
                if nll_covs is not None
                else None
            ),
            r_trace_stable=float(run.trace_r[half:].mean()),
            q_trace_stable=float(run.trace_q[half:].mean()),
            filter_run=run if config.record_history else None,
            correction=table if config.record_history else None,
        )
        records.append(rec)
        if it == 0:
            first_raw = raw
            first_smoothed = smoothed
        prev_raw = raw
        correction = smoothed
        last_run = run
        last_table = table
        if it >= 1 and delta < threshold:
            stopped = it < config.max_iterations
            break
    return OmecResult(
        iterations=records,
        final_run=last_run,
        final_correction=last_table,
        threshold=threshold,
        stopped_early=stopped,
        first_raw=first_raw,
        first_smoothed=first_smoothed,
        index=index,
    )


def _rmse_against(run: FilterRun, truth: Trajectory, delays: int) -> np.ndarray:
    from .harness import rmse  # local import; harness owns the reporting op

    return rmse(run.posterior_means, truth.states, spin_up=max(delays, 50))


def solve_correction_system(
    index,
    targets: np.ndarray,
    num_neighbors: int,
    ridge: float = RIDGE,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Linear-system estimator for the correction parameters.

    Builds the sparse weights matrix W (row k holds the kernel weights of
    step k's neighbors; rows before the first valid step are identity) and
    solves W bhat = targets per component in least squares.  If the plain
    solve does not converge cleanly, a ridge-regularized solve (damping
    sqrt(ridge)) is used and the warning flag set.

    Returns
    -------
    (bhat, smoothed, warned)
        bhat are the solved parameters, smoothed = W bhat their kernel
        evaluation (comparable with the simple residual pipeline), warned
        marks rank-deficiency fallback.
    """
    targets = np.asarray(targets, dtype=float)
    if isinstance(index, LocalizedDelayIndex):
        bhat = np.empty_like(targets)
        smoothed = np.empty_like(targets)
        warned = False
        for i, node_index in enumerate(index.indexes):
            b, s, w = solve_correction_system(
                node_index, targets[:, i : i + 1], num_neighbors, ridge
            )
            bhat[:, i] = b[:, 0]
            smoothed[:, i] = s[:, 0]
            warned = warned or w
        return bhat, smoothed, warned
    T = index.num_steps
    if targets.shape[0] != T:
        raise DimensionMismatchError(f"targets must have {T} rows")
    nbs, wts = index.neighbors_all(num_neighbors)
    lo = index.delays
    rows = np.repeat(np.arange(lo, T), num_neighbors)
    cols = nbs.ravel()
    vals = wts.ravel()
    if lo:
        rows = np.concatenate([np.arange(lo), rows])
        cols = np.concatenate([np.arange(lo), cols])
        vals = np.concatenate([np.ones(lo), vals])
    W = sp.csr_matrix((vals, (rows, cols)), shape=(T, T))
    bhat = np.empty_like(targets)
    warned = False
    for j in range(targets.shape[1]):
        sol = lsqr(W, targets[:, j], atol=1e-10, btol=1e-10, iter_lim=8 * T)
        x, istop = sol[0], sol[1]
        if istop not in (1, 2):
            x = lsqr(
                W, targets[:, j], damp=np.sqrt(ridge), atol=1e-10, btol=1e-10,
                iter_lim=8 * T,
            )[0]
            warned = True
        bhat[:, j] = x
    smoothed = np.asarray(W @ bhat)
    return bhat, smoothed, warned


def negative_log_likelihood(
    run: FilterRun,
    corrections: CorrectionTable,
    observations: ObservationSeries,
    model: ModelSpec,
    Q: np.ndarray,
    R: np.ndarray,
) -> float:
    """Joint negative log likelihood of states and corrected observations.

        sum_k 1/2 ||y_k - g(x_k) - b(x_k)||^2_R
            + 1/2 ||x_{k+1} - f(x_k)||^2_Q

    with ||v||^2_A = v^T A^-1 v.  The observation term uses the correction
    table directly (its raw rows are y_k - g(x_k)); rows outside the valid
    delay range are skipped.  Constant normalization terms are dropped.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    try:
        lq = np.linalg.cholesky(Q)
        lr = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError(
            "Q and R must be symmetric positive definite for the likelihood"
        ) from exc
    resid = corrections.raw - corrections.smoothed
    resid = resid[np.isfinite(resid[:, 0])]
    u = solve_triangular(lr, resid.T, lower=True)
    obs_term = 0.5 * float(np.sum(u * u))
    x = run.posterior_means
    if len(x) > 1:
        pred = propagate_states(model, x[:-1])
        dyn = x[1:] - pred
        v = solve_triangular(lq, dyn.T, lower=True)
        dyn_term = 0.5 * float(np.sum(v * v))
    else:
        dyn_term = 0.0
    return obs_term + dyn_term


def write_iterations_csv(path, result: OmecResult) -> None:
    """Per-iteration scalars: ``iter, delta_g, rmse_1..rmse_n, nll``."""
    recs = result.iterations
    n = len(recs[0].rmse) if recs[0].rmse is not None else 0
    header = ["iter", "delta_g"] + [f"rmse_{i + 1}" for i in range(n)] + ["nll"]
    cols = [np.array([r.index for r in recs], dtype=int)]
    cols.append(np.array([r.delta_g for r in recs]))
    for i in range(n):
        cols.append(np.array([r.rmse[i] for r in recs]))
    cols.append(
        np.array([r.nll if r.nll is not None else np.nan for r in recs])
    )
    write_csv(path, header, cols)
