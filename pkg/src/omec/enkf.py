"""Ensemble Kalman filter with a deterministic sigma-point ensemble.

Each step regenerates an ensemble of E = 2n + 1 members from the posterior
mean and covariance: the mean plus symmetric deviations along the columns of
the SPD square root of P, scaled so the unweighted sample covariance (1/E
divisor) reproduces P exactly.  Members are propagated through the
deterministic model, mapped to observation space, and all first and second
moments in the update use the plain 1/E divisor:

    P-   = (1/E) sum (x_i - xbar)(x_i - xbar)^T + Q
    P^y  = (1/E) sum (y_i - ybar)(y_i - ybar)^T + R
    P^xy = (1/E) sum (x_i - xbar)(y_i - ybar)^T
    K    = P^xy (P^y)^-1,   x+ = xbar + K (y - ybar),   P+ = P- - K P^yx .

Q and R can be adapted online from lag-0 and lag-1 innovation products with
an exponential moving average; see :func:`adapt_noise`.  The lag-1 products,
mapped back through ensemble-linearized transition and observation maps,
estimate how much of the innovation covariance is explained by prior state
error; that share feeds Q and the remainder feeds R.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _fastpath
from .dynamics import ModelSpec, ObservationSeries, propagate_states, spd_sqrt
from .errors import (
    DimensionMismatchError,
    FilterDivergenceError,
    InvalidArgumentError,
    InvalidCovarianceError,
    NumericalFailureError,
)
from .observation import (
    IdentityObservation,
    LinearObservation,
    ObservationFunction,
    _StepCorrectedFunction,
)
from .serialize import write_csv

EIG_FLOOR = 1e-8
JITTER_SCALE = 1e-10
# Fraction of the excess prior covariance implied by the lag-1 statistics
# that is believed as process noise.  Under a misspecified observation model
# the split between Q and R is not identifiable from innovations alone, and
# the two pure attributions are both self-reinforcing: all-to-R starves Q,
# collapses the gain, and the filter free-runs; all-to-Q inflates the gain
# until the filter parrots the (biased) observations.  A fractional share
# keeps the gain in the weakly synchronized regime where the state estimate
# tracks the truth well enough for downstream residual smoothing to work.
PROCESS_NOISE_SHARE = 0.2
# Instantaneous noise estimates are rank-one products with heavy tails; an
# estimate whose trace exceeds this multiple of the current EMA trace is
# scaled down to it, which rate-limits upward excursions without slowing
# decay toward smaller values.
CLIP_FACTOR = 5.0

_SIDECAR_MAGIC = b"OMEC"
_SIDECAR_VERSION = 1


@dataclass
class FilterConfig:
    """Filter settings.

    Parameters
    ----------
    ensemble_size : int or None
        E; None selects 2n + 1.  Only symmetric sigma ensembles are
        supported, so an explicit value must equal 2n + 1.
    x0_mean, P0 : ndarray or None
        Initial posterior mean and covariance; None selects zeros(n) and
        10 I.
    adaptive : bool
        Adapt Q and R online from innovation statistics.
    tau : float
        Moving-average window of the adaptation; may be ``inf`` (freeze).
    Q_init, R_init : ndarray or None
        Starting covariances.  Q_init None selects 0.1 I.  R_init None
        triggers a bootstrap: the first 100 steps are run once with R = I,
        the diagonal sample variance of those innovations becomes R_init,
        and the filter restarts from step 0.
    r_inflation : float
        Multiplier on R, applied when adaptation is off.
    """

    ensemble_size: Optional[int] = None
    x0_mean: Optional[np.ndarray] = None
    P0: Optional[np.ndarray] = None
    adaptive: bool = True
    tau: float = 50.0
    Q_init: Optional[np.ndarray] = None
    R_init: Optional[np.ndarray] = None
    r_inflation: float = 1.0

    def __post_init__(self):
        if self.tau <= 1.0:
            raise InvalidArgumentError("tau must exceed 1")
        if self.r_inflation <= 0:
            raise InvalidArgumentError("r_inflation must be positive")


@dataclass
class FilterRun:
    """Per-step filter output over a whole observation series."""

    posterior_means: np.ndarray  # (T, n)
    posterior_covs: np.ndarray  # (T, n, n)
    prior_means: np.ndarray  # (T, n)
    predicted_obs: np.ndarray  # (T, m), ensemble-mean prediction
    innovations: np.ndarray  # (T, m)
    trace_q: np.ndarray  # (T,)
    trace_r: np.ndarray  # (T,)
    Q_final: np.ndarray
    R_final: np.ndarray
    ensemble_size: int


class AnalysisResult:
    """Moments produced by a single analysis step."""

    __slots__ = (
        "posterior_mean",
        "posterior_cov",
        "innovation",
        "gain",
        "prior_mean",
        "prior_cov",
        "prior_cov_sample",
        "obs_mean",
        "obs_cov_sample",
        "cross_cov",
    )

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw[name])


def make_ensemble(mean: np.ndarray, cov: np.ndarray, ensemble_size: int) -> np.ndarray:
    """Symmetric sigma ensemble with exact unweighted sample moments.

    Rows are {mean} and {mean +/- c S e_i} with S the SPD square root of cov
    and c = sqrt(E / 2), which makes the 1/E sample covariance equal cov and
    the sample mean equal mean exactly.  cov is symmetrized and negative
    eigenvalues are clipped at zero first.
    """
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[0]
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (n, n):
        raise DimensionMismatchError(f"cov must be {n}x{n}")
    if ensemble_size != 2 * n + 1:
        raise InvalidArgumentError(
            f"symmetric sigma ensemble requires E = 2n + 1 = {2 * n + 1}, "
            f"got {ensemble_size}"
        )
    s = spd_sqrt(cov)
    c = np.sqrt(ensemble_size / 2.0)
    ens = np.empty((ensemble_size, n))
    ens[0] = mean
    ens[1 : n + 1] = mean + c * s.T
    ens[n + 1 :] = mean - c * s.T
    return ens


def forecast_step(
    ensemble: np.ndarray, model: ModelSpec, obs_fn: ObservationFunction
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate members one observation interval and map to observation space.

    Propagation is deterministic (no noise injection); obs_fn must already be
    bound to the current step when it carries a time-dependent correction.
    Member order is preserved.
    """
    prior = propagate_states(model, np.asarray(ensemble, dtype=float))
    return prior, np.asarray(obs_fn(prior), dtype=float)


def analysis_step(
    prior_ensemble: np.ndarray,
    obs_ensemble: np.ndarray,
    y: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> AnalysisResult:
    """Kalman update from ensemble sample moments (1/E divisors throughout)."""
    X = np.asarray(prior_ensemble, dtype=float)
    Y = np.asarray(obs_ensemble, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise DimensionMismatchError("prior and observation ensembles must align")
    E = len(X)
    if E < 2:
        raise InvalidArgumentError("need at least 2 ensemble members")
    if y.shape != (Y.shape[1],):
        raise DimensionMismatchError("observation dimension mismatch")
    xbar = X.mean(axis=0)
    ybar = Y.mean(axis=0)
    Xd = X - xbar
    Yd = Y - ybar
    prior_cov_sample = Xd.T @ Xd / E
    prior_cov = prior_cov_sample + Q
    obs_cov_sample = Yd.T @ Yd / E
    py = obs_cov_sample + R
    cross = Xd.T @ Yd / E
    gain = _solve_gain(py, cross)
    innovation = y - ybar
    posterior_mean = xbar + gain @ innovation
    posterior_cov = prior_cov - gain @ cross.T
    posterior_cov = 0.5 * (posterior_cov + posterior_cov.T)
    return AnalysisResult(
        posterior_mean=posterior_mean,
        posterior_cov=posterior_cov,
        innovation=innovation,
        gain=gain,
        prior_mean=xbar,
        prior_cov=prior_cov,
        prior_cov_sample=prior_cov_sample,
        obs_mean=ybar,
        obs_cov_sample=obs_cov_sample,
        cross_cov=cross,
    )


def _solve_gain(py: np.ndarray, cross: np.ndarray) -> np.ndarray:
    """K = P^xy (P^y)^-1 via a symmetric solve, with a jitter retry."""
    try:
        return np.linalg.solve(py, cross.T).T
    except np.linalg.LinAlgError:
        jitter = JITTER_SCALE * np.trace(py) / len(py)
        try:
            return np.linalg.solve(py + jitter * np.eye(len(py)), cross.T).T
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError(
                "observation covariance solve failed even with jitter"
            ) from exc


def _floor_spd(mat: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrize and raise eigenvalues to at least ``floor``."""
    m = 0.5 * (mat + mat.T)
    lam, vec = np.linalg.eigh(m)
    if lam[0] >= floor:
        return m
    lam = np.maximum(lam, floor)
    return (vec * lam) @ vec.T


def _psd_part(mat: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix to the symmetric part (negative eigenvalues zeroed)."""
    return _floor_spd(mat, 0.0)


def _solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b: direct solve, then jittered, then least squares."""
    if a.shape[0] == a.shape[1]:
        try:
            return np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            pass
        trace = np.trace(a)
        jitter = JITTER_SCALE * (trace / len(a) if trace > 0 else 1.0)
        try:
            return np.linalg.solve(a + jitter * np.eye(len(a)), b)
        except np.linalg.LinAlgError:
            pass
    return np.linalg.lstsq(a, b, rcond=None)[0]


def _damped_solve(a: np.ndarray, b: np.ndarray, frac: float = 0.05) -> np.ndarray:
    """Minimum-norm solution of a @ x = b with Tikhonov damping.

    The damping is relative to the scale of ``a``, so directions with
    singular values below ``frac`` of that scale contribute boundedly
    instead of amplifying noise; a state-dependent observation Jacobian
    can lose rank for extended stretches.
    """
    m = a.shape[0]
    lam2 = (frac * np.linalg.norm(a)) ** 2 / m
    g = a @ a.T + lam2 * np.eye(m)
    return a.T @ _solve_linear(g, b)


def _obs_jacobian(obs_fn, res: AnalysisResult):
    """Linearized observation map at the current step, or None for identity.

    Exact for identity and linear functions (a per-step additive correction
    does not change the Jacobian); otherwise the ensemble regression of
    observation deviations on state deviations.
    """
    base = obs_fn
    while isinstance(base, _StepCorrectedFunction):
        base = base.base
    if isinstance(base, IdentityObservation):
        return None
    if isinstance(base, LinearObservation):
        return base.matrix
    return _solve_linear(res.prior_cov_sample, res.cross_cov).T


def adapt_noise(
    innovation: np.ndarray,
    prev_innovation: np.ndarray,
    prev_gain: np.ndarray,
    transition_obs_map,
    prev_prior_cov_sample: np.ndarray,
    Q_prev: np.ndarray,
    R_prev: np.ndarray,
    tau: float,
    prev_obs_map=None,
    process_share: Optional[float] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One exponential-moving-average update of (Q, R) from innovations.

    The lag-0 product gives the observation noise estimate directly:

        R~ = C0 - H S H^T,    C0 = eps_{k-1} eps_{k-1}^T,

    with S the prior sample covariance (without Q) at step k-1: whatever
    innovation power the propagated ensemble spread does not explain is
    treated as observation error.  The process noise estimate comes from the
    lag-1 product C1 = eps_k eps_{k-1}^T through the filter identity

        A P- H^T = C1 + A K_{k-1} C0,    A = H_k F_k

    (F the linearized transition over one interval, H the linearized
    observation map, K the Kalman gain actually applied), which yields an
    instantaneous estimate of the true prior error covariance P-; the part
    of it beyond the propagated spread is

        Q~ = P-_est - S,

    scaled by ``process_share`` (module default) and projected onto its PSD
    part.  Both estimates are blended as X_k = (1 - 1/tau) X_{k-1} + (1/tau) X~,
    symmetrized, and eigenvalue-floored at 1e-8.  tau = inf freezes the
    inputs.

    ``transition_obs_map`` is A; ``prev_obs_map`` is H at step k-1, with
    None meaning identity.
    """
    if tau <= 1.0:
        raise InvalidArgumentError("tau must exceed 1")
    if not np.isfinite(tau):
        return Q_prev, R_prev
    if process_share is None:
        process_share = PROCESS_NOISE_SHARE
    alpha = 1.0 / tau
    c0 = prev_innovation[:, None] * prev_innovation[None, :]
    c1 = innovation[:, None] * prev_innovation[None, :]
    # prior error covariance, right-multiplied by H^T
    pht = _damped_solve(transition_obs_map, c1) + prev_gain @ c0
    if prev_obs_map is None:
        p_est = pht
        sample_obs = prev_prior_cov_sample
    else:
        p_est = _damped_solve(prev_obs_map, pht.T).T
        sample_obs = prev_obs_map @ prev_prior_cov_sample @ prev_obs_map.T
    # the difference of two covariance estimates is symmetric but indefinite;
    # projecting onto its PSD part keeps the trace cap and the EMA floor from
    # interacting (floored negative directions would otherwise inflate Q)
    q_inst = _psd_part(process_share * (p_est - prev_prior_cov_sample))
    r_inst = c0 - sample_obs
    if _degenerate(q_inst, c0, prev_prior_cov_sample) or _degenerate(
        r_inst, c0, prev_prior_cov_sample
    ):
        # non-finite or wildly amplified estimates (near-singular
        # linearization solves) are dropped rather than blended
        return Q_prev, R_prev
    q_inst = _clip_trace(0.5 * (q_inst + q_inst.T), Q_prev)
    r_inst = _clip_trace(0.5 * (r_inst + r_inst.T), R_prev)
    Q = _floor_spd((1.0 - alpha) * Q_prev + alpha * q_inst)
    R = _floor_spd((1.0 - alpha) * R_prev + alpha * r_inst)
    return Q, R


def _degenerate(inst: np.ndarray, c0: np.ndarray, sample: np.ndarray) -> bool:
    size = np.linalg.norm(inst)
    if not np.isfinite(size):
        return True
    scale = np.linalg.norm(c0) + np.linalg.norm(sample) + len(inst) * EIG_FLOOR
    return size > 1e3 * scale


def _clip_trace(inst: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Scale an instantaneous estimate down to the trace growth limit.

    Only positive excursions are limited: shrinking toward zero must stay
    unconstrained or small values could never recover (the cap scales with
    the current trace).
    """
    cap = CLIP_FACTOR * max(np.trace(current), len(current) * EIG_FLOOR)
    tr = np.trace(inst)
    if tr > cap:
        return inst * (cap / tr)
    return inst


def run_filter(
    observations: ObservationSeries,
    model: ModelSpec,
    obs_fn: ObservationFunction,
    config: FilterConfig,
) -> FilterRun:
    """Filter a whole observation series.

    Deterministic: contains no random number generation, so identical inputs
    reproduce identical output bit for bit.

    Raises
    ------
    FilterDivergenceError
        If a posterior mean or covariance becomes non-finite, reporting the
        step index.
    """
    ys = np.asarray(observations.values, dtype=float)
    T, m = ys.shape
    n = model.dim
    if obs_fn.dim_in != n:
        raise DimensionMismatchError(
            f"observation function expects dimension {obs_fn.dim_in}, model has {n}"
        )
    if obs_fn.dim_out != m:
        raise DimensionMismatchError(
            f"observation function produces dimension {obs_fn.dim_out}, series has {m}"
        )
    E = config.ensemble_size if config.ensemble_size is not None else 2 * n + 1
    x0 = (
        np.zeros(n)
        if config.x0_mean is None
        else np.asarray(config.x0_mean, dtype=float)
    )
    P0 = (
        10.0 * np.eye(n)
        if config.P0 is None
        else np.asarray(config.P0, dtype=float)
    )
    if x0.shape != (n,) or P0.shape != (n, n):
        raise DimensionMismatchError("x0_mean / P0 shapes do not match the model")
    Q0 = (
        0.1 * np.eye(n)
        if config.Q_init is None
        else np.asarray(config.Q_init, dtype=float)
    )
    _require_spsd(Q0, "Q_init")
    if config.R_init is None:
        R0 = _bootstrap_r(ys, model, obs_fn, x0, P0, Q0, E)
    else:
        R0 = np.asarray(config.R_init, dtype=float)
        _require_spsd(R0, "R_init")
    if not config.adaptive:
        R0 = R0 * config.r_inflation

    out = _filter_pass(ys, model, obs_fn, x0, P0, Q0, R0, E, config, T)
    return out


def _require_spsd(mat, name):
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatchError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise InvalidCovarianceError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(0.5 * (mat + mat.T))[0] < -1e-10:
        raise InvalidCovarianceError(f"{name} must be positive semidefinite")


def _bootstrap_r(ys, model, obs_fn, x0, P0, Q0, E):
    """Default R_init: diagonal sample variance of 100 identity-R innovations."""
    steps = min(100, len(ys))
    probe = _filter_pass(
        ys[:steps], model, obs_fn, x0, P0, Q0, np.eye(ys.shape[1]),
        E, FilterConfig(adaptive=False), steps,
    )
    var = probe.innovations.var(axis=0)
    return np.diag(np.maximum(var, EIG_FLOOR))


def _filter_pass(ys, model, obs_fn, x0, P0, Q0, R0, E, config, T):
    n = len(x0)
    m = ys.shape[1]
    if E == 2 * n + 1 and _fastpath.kernel_supports(model, obs_fn):
        try:
            return _fastpath.run_pass(ys, model, obs_fn, x0, P0, Q0, R0, E, config, T)
        except np.linalg.LinAlgError:
            # exactly singular solve inside the compiled loop; the
            # interpreted path below retries with conditioned fallbacks
            pass
    post_means = np.empty((T, n))
    post_covs = np.empty((T, n, n))
    prior_means = np.empty((T, n))
    pred_obs = np.empty((T, m))
    innovations = np.empty((T, m))
    trace_q = np.empty(T)
    trace_r = np.empty(T)
    x, P = x0, P0
    Q, R = Q0, R0
    adaptive = config.adaptive and np.isfinite(config.tau)
    prev_innovation = None
    prev_gain = None
    prev_obs_map = None
    prev_prior_sample = None
    for k in range(T):
        ens = make_ensemble(x, P, E)
        fn = obs_fn.at_step(k)
        prior, obs_ens = forecast_step(ens, model, fn)
        res = analysis_step(prior, obs_ens, ys[k], Q, R)
        if adaptive:
            obs_map = _obs_jacobian(fn, res)
            # innovation about the propagated mean: at large ensemble spread
            # the sigma-point predictive mean acquires a spread-dependent
            # offset that would feed back into the noise estimates
            mean_prior = propagate_states(model, x[None, :])
            adapt_innov = ys[k] - np.asarray(fn(mean_prior), dtype=float)[0]
            if prev_innovation is not None:
                # ensemble-linearized transition over the last interval:
                # regression of propagated deviations on the previous
                # sigma-point deviations
                cross01 = (prior - res.prior_mean).T @ (ens - x) / E
                fhat = _solve_linear(P, cross01.T).T
                trans = fhat if obs_map is None else obs_map @ fhat
                Q, R = adapt_noise(
                    adapt_innov, prev_innovation, prev_gain, trans,
                    prev_prior_sample, Q, R, config.tau,
                    prev_obs_map=prev_obs_map,
                )
            prev_obs_map = obs_map
            prev_prior_sample = res.prior_cov_sample
            prev_innovation = adapt_innov
            prev_gain = res.gain
        x = res.posterior_mean
        P = res.posterior_cov
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(P))):
            raise FilterDivergenceError(k)
        post_means[k] = x
        post_covs[k] = P
        prior_means[k] = res.prior_mean
        pred_obs[k] = res.obs_mean
        innovations[k] = res.innovation
        trace_q[k] = np.trace(Q)
        trace_r[k] = np.trace(R)
    return FilterRun(
        posterior_means=post_means,
        posterior_covs=post_covs,
        prior_means=prior_means,
        predicted_obs=pred_obs,
        innovations=innovations,
        trace_q=trace_q,
        trace_r=trace_r,
        Q_final=Q,
        R_final=R,
        ensemble_size=E,
    )


def write_filter_csv(path, run: FilterRun) -> None:
    T, n = run.posterior_means.shape
    m = run.innovations.shape[1]
    header = (
        ["k"]
        + [f"x{i + 1}+" for i in range(n)]
        + [f"innov_{i + 1}" for i in range(m)]
        + ["trace_Q", "trace_R"]
    )
    cols = (
        [np.arange(T)]
        + [run.posterior_means[:, i] for i in range(n)]
        + [run.innovations[:, i] for i in range(m)]
        + [run.trace_q, run.trace_r]
    )
    write_csv(path, header, cols)


def write_covariance_sidecar(path, covariances: np.ndarray) -> None:
    """Binary sidecar for posterior covariances.

    Layout (little endian): magic ``OMEC`` (4 bytes), version uint32, T
    uint64, n uint64, then T * n * n float64 values, row major.
    """
    covs = np.ascontiguousarray(covariances, dtype="<f8")
    if covs.ndim != 3 or covs.shape[1] != covs.shape[2]:
        raise DimensionMismatchError("covariances must be (T, n, n)")
    T, n, _ = covs.shape
    with open(path, "wb") as fh:
        fh.write(_SIDECAR_MAGIC)
        fh.write(np.uint32(_SIDECAR_VERSION).astype("<u4").tobytes())
        fh.write(np.uint64(T).astype("<u8").tobytes())
        fh.write(np.uint64(n).astype("<u8").tobytes())
        fh.write(covs.tobytes())


def read_covariance_sidecar(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SIDECAR_MAGIC:
            raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != _SIDECAR_VERSION:
            raise InvalidArgumentError(f"{path}: unsupported version {version}")
        T = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        n = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        data = np.frombuffer(fh.read(T * n * n * 8), dtype="<f8")
    if data.size != T * n * n:
        raise InvalidArgumentError(f"{path}: truncated covariance payload")
    return data.reshape(T, n, n).copy()
