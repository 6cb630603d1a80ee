"""Compiled whole-series filter loop for the builtin models.

The per-step filter math lives in :mod:`omec.enkf`; at 3-40 state dimensions
the arithmetic is trivial and interpreter overhead dominates the runtime of a
multi-pass twin experiment.  This module repeats the same step sequence inside
a single jit-compiled loop for the cases that actually occur in the reference
scenarios: a builtin model (lorenz63 / lorenz96) observed through an identity,
fixed linear, or componentwise map, optionally with a per-step additive
correction.

Everything here mirrors the reference implementation operation for operation
(same moment divisors, same solve sequence, same adaptation formulas on the
same branch structure), so outputs agree to floating-point noise; a parity
test enforces that.  Anything the kernel does not cover, and any in-kernel
linear-algebra failure, falls back to the reference path.
"""

from __future__ import annotations

import numpy as np

from .dynamics import (
    _HAVE_NUMBA,
    _interval_lorenz63,
    _interval_lorenz96,
    njit,
)
from .observation import (
    ComponentwiseObservation,
    CorrectedObservationFunction,
    IdentityObservation,
    LinearObservation,
)

_KERNEL_MODELS = ("lorenz63", "lorenz96")
# componentwise map opcodes for the compiled loop
_CW_CODES = {"identity": 0, "sin": 1, "cos": 2, "shift": 3, "scale": 4}


def kernel_supports(model, obs_fn) -> bool:
    """Whether the compiled loop covers this model / observation pairing."""
    if not _HAVE_NUMBA:
        return False
    if model.name not in _KERNEL_MODELS:
        return False
    base = obs_fn
    if isinstance(base, CorrectedObservationFunction):
        base = base.base
    return isinstance(
        base, (IdentityObservation, LinearObservation, ComponentwiseObservation)
    )


@njit(cache=True)
def _spd_sqrt_nb(cov):  # pragma: no cover - jit
    c = 0.5 * (cov + cov.T)
    u, s, vt = np.linalg.svd(c)
    n = c.shape[0]
    scaled = np.empty((n, n))
    for i in range(n):
        sign = 0.0
        for j in range(n):
            sign += u[j, i] * vt[i, j]
        root = np.sqrt(s[i]) if sign > 0.0 else 0.0
        for j in range(n):
            scaled[j, i] = u[j, i] * root
    return scaled @ u.T


@njit(cache=True)
def _floor_spd_nb(mat, floor):  # pragma: no cover - jit
    m = 0.5 * (mat + mat.T)
    lam, vec = np.linalg.eigh(m)
    if lam[0] >= floor:
        return m
    lam = np.maximum(lam, floor)
    return (vec * lam) @ vec.T


@njit(cache=True)
def _damped_solve_nb(a, b):  # pragma: no cover - jit
    m = a.shape[0]
    lam2 = (0.05 * np.linalg.norm(a)) ** 2 / m
    g = a @ a.T + lam2 * np.eye(m)
    return a.T @ np.linalg.solve(g, b)


@njit(cache=True)
def _clip_trace_nb(inst, current, clip_factor, eig_floor):  # pragma: no cover - jit
    cap = clip_factor * max(np.trace(current), current.shape[0] * eig_floor)
    tr = np.trace(inst)
    if tr > cap:
        return inst * (cap / tr)
    return inst


@njit(cache=True)
def _cw_map_nb(vals, codes, params):  # pragma: no cover - jit
    rows, cols = vals.shape
    out = np.empty((rows, cols))
    for j in range(cols):
        code = codes[j]
        p = params[j]
        for i in range(rows):
            v = vals[i, j]
            if code == 1:
                out[i, j] = np.sin(v)
            elif code == 2:
                out[i, j] = np.cos(v)
            elif code == 3:
                out[i, j] = v + p
            elif code == 4:
                out[i, j] = v * p
            else:
                out[i, j] = v
    return out


@njit(cache=True)
def _adapt_nb(
    innov,
    prev_innov,
    prev_gain,
    trans,
    prev_sample,
    Q,
    R,
    tau,
    share,
    obs_identity,
    H,
    eig_floor,
    clip_factor,
):  # pragma: no cover - jit
    alpha = 1.0 / tau
    m = innov.shape[0]
    c0 = prev_innov.reshape(m, 1) * prev_innov.reshape(1, m)
    c1 = innov.reshape(m, 1) * prev_innov.reshape(1, m)
    pht = _damped_solve_nb(trans, c1) + prev_gain @ c0
    if obs_identity:
        p_est = pht
        sample_obs = prev_sample
    else:
        p_est = _damped_solve_nb(H, pht.T.copy()).T.copy()
        sample_obs = H @ prev_sample @ H.T
    q_inst = _floor_spd_nb(share * (p_est - prev_sample), 0.0)
    r_inst = c0 - sample_obs
    scale = np.linalg.norm(c0) + np.linalg.norm(prev_sample)
    nq = np.linalg.norm(q_inst)
    nr = np.linalg.norm(r_inst)
    if not (np.isfinite(nq) and np.isfinite(nr)):
        return Q, R
    if nq > 1e3 * (scale + q_inst.shape[0] * eig_floor):
        return Q, R
    if nr > 1e3 * (scale + r_inst.shape[0] * eig_floor):
        return Q, R
    q_inst = _clip_trace_nb(0.5 * (q_inst + q_inst.T), Q, clip_factor, eig_floor)
    r_inst = _clip_trace_nb(0.5 * (r_inst + r_inst.T), R, clip_factor, eig_floor)
    Q_new = _floor_spd_nb((1.0 - alpha) * Q + alpha * q_inst, eig_floor)
    R_new = _floor_spd_nb((1.0 - alpha) * R + alpha * r_inst, eig_floor)
    return Q_new, R_new


@njit(cache=True)
def _whole_pass_nb(
    ys,
    offsets,
    H,
    obs_mode,
    cw_codes,
    cw_params,
    model_id,
    mp,
    h,
    nsub,
    x0,
    P0,
    Q0,
    R0,
    adaptive,
    tau,
    share,
    eig_floor,
    clip_factor,
):  # pragma: no cover - jit
    # obs_mode: 0 identity, 1 fixed linear (H), 2 componentwise (cw arrays);
    # for mode 2 the observation Jacobian is the per-step ensemble regression,
    # so the map used on step k-1 must be carried into the adaptation
    T, m = ys.shape
    n = x0.shape[0]
    E = 2 * n + 1
    post_means = np.empty((T, n))
    post_covs = np.empty((T, n, n))
    prior_means = np.empty((T, n))
    pred_obs = np.empty((T, m))
    innovations = np.empty((T, m))
    trace_q = np.empty(T)
    trace_r = np.empty(T)
    x = x0.copy()
    P = P0.copy()
    Q = Q0.copy()
    R = R0.copy()
    have_prev = False
    prev_innov = np.zeros(m)
    prev_gain = np.zeros((n, m))
    prev_sample = np.zeros((n, n))
    H_prev = H.copy()
    status = -1
    c = np.sqrt(E / 2.0)
    for k in range(T):
        S = _spd_sqrt_nb(P)
        ens = np.empty((E, n))
        for j in range(n):
            ens[0, j] = x[j]
        for i in range(n):
            for j in range(n):
                dev = c * S[j, i]
                ens[1 + i, j] = x[j] + dev
                ens[1 + n + i, j] = x[j] - dev
        if model_id == 0:
            prior = _interval_lorenz63(ens, mp[0], mp[1], mp[2], h, nsub)
        else:
            prior = _interval_lorenz96(ens, mp[0], mp[1], h, nsub)
        ok = True
        for i in range(E):
            for j in range(n):
                if not np.isfinite(prior[i, j]):
                    ok = False
        if not ok:
            status = k
            break
        if obs_mode == 0:
            obs_ens = prior + offsets[k]
        elif obs_mode == 1:
            obs_ens = prior @ H.T + offsets[k]
        else:
            obs_ens = _cw_map_nb(prior, cw_codes, cw_params) + offsets[k]
        xbar = np.sum(prior, axis=0) / E
        ybar = np.sum(obs_ens, axis=0) / E
        Xd = prior - xbar
        Yd = obs_ens - ybar
        prior_cov_sample = Xd.T @ Xd / E
        prior_cov = prior_cov_sample + Q
        obs_cov_sample = Yd.T @ Yd / E
        py = obs_cov_sample + R
        cross = Xd.T @ Yd / E
        gain = np.linalg.solve(py, cross.T.copy()).T.copy()
        innovation = ys[k] - ybar
        post_mean = xbar + gain @ innovation
        post_cov = prior_cov - gain @ cross.T
        post_cov = 0.5 * (post_cov + post_cov.T)
        if adaptive:
            if obs_mode == 2:
                H_cur = np.linalg.solve(prior_cov_sample, cross).T.copy()
            else:
                H_cur = H
            xrow = x.copy().reshape(1, n)
            if model_id == 0:
                mean_prop = _interval_lorenz63(xrow, mp[0], mp[1], mp[2], h, nsub)
            else:
                mean_prop = _interval_lorenz96(xrow, mp[0], mp[1], h, nsub)
            if obs_mode == 0:
                mean_pred = mean_prop[0] + offsets[k]
            elif obs_mode == 1:
                mean_pred = H @ mean_prop[0] + offsets[k]
            else:
                mean_pred = _cw_map_nb(mean_prop, cw_codes, cw_params)[0] + offsets[k]
            adapt_innov = ys[k] - mean_pred
            if have_prev:
                cross01 = Xd.T @ (ens - x) / E
                fhat = np.linalg.solve(P, cross01.T.copy()).T.copy()
                if obs_mode == 0:
                    trans = fhat
                else:
                    trans = H_cur @ fhat
                Q, R = _adapt_nb(
                    adapt_innov,
                    prev_innov,
                    prev_gain,
                    trans,
                    prev_sample,
                    Q,
                    R,
                    tau,
                    share,
                    obs_mode == 0,
                    H_prev,
                    eig_floor,
                    clip_factor,
                )
            have_prev = True
            prev_innov = adapt_innov
            prev_gain = gain
            prev_sample = prior_cov_sample
            H_prev = H_cur
        x = post_mean
        P = post_cov
        ok = True
        for j in range(n):
            if not np.isfinite(x[j]):
                ok = False
        for i in range(n):
            for j in range(n):
                if not np.isfinite(P[i, j]):
                    ok = False
        if not ok:
            status = k
            break
        post_means[k] = x
        post_covs[k] = P
        prior_means[k] = xbar
        pred_obs[k] = ybar
        innovations[k] = innovation
        trace_q[k] = np.trace(Q)
        trace_r[k] = np.trace(R)
    return (
        status,
        post_means,
        post_covs,
        prior_means,
        pred_obs,
        innovations,
        trace_q,
        trace_r,
        Q,
        R,
    )


def run_pass(ys, model, obs_fn, x0, P0, Q0, R0, E, config, T):
    """Run the compiled loop and package the result like the reference path.

    Raises the same divergence error (with step index) on non-finite states;
    may raise ``numpy.linalg.LinAlgError`` on an exactly singular solve, in
    which case the caller retries on the reference path, which carries
    conditioned fallbacks.
    """
    # imported here: enkf imports this module
    from .enkf import CLIP_FACTOR, EIG_FLOOR, PROCESS_NOISE_SHARE, FilterRun
    from .errors import FilterDivergenceError

    base = obs_fn
    if isinstance(base, CorrectedObservationFunction):
        offsets = np.ascontiguousarray(base.correction[:T], dtype=float)
        base = base.base
    else:
        offsets = np.zeros((T, ys.shape[1]))
    m = ys.shape[1]
    cw_codes = np.zeros(m, dtype=np.int64)
    cw_params = np.zeros(m)
    if isinstance(base, IdentityObservation):
        obs_mode = 0
        H = np.eye(len(x0))
    elif isinstance(base, LinearObservation):
        obs_mode = 1
        H = np.ascontiguousarray(base.matrix, dtype=float)
    else:
        obs_mode = 2
        H = np.eye(len(x0))
        for i, (name, p) in enumerate(base.maps):
            cw_codes[i] = _CW_CODES[name]
            cw_params[i] = 0.0 if p is None else p
    if model.name == "lorenz63":
        model_id = 0
        p = model.params
        mp = np.array([p["sigma"], p["rho"], p["beta"]])
    else:
        model_id = 1
        p = model.params
        mp = np.array([p["a"], p["F"], 0.0])
    adaptive = bool(config.adaptive and np.isfinite(config.tau))
    tau = float(config.tau) if adaptive else 2.0
    out = _whole_pass_nb(
        np.ascontiguousarray(ys, dtype=float),
        offsets,
        H,
        obs_mode,
        cw_codes,
        cw_params,
        model_id,
        mp,
        model.dt / model.substeps,
        model.substeps,
        np.ascontiguousarray(x0, dtype=float),
        np.ascontiguousarray(P0, dtype=float),
        np.ascontiguousarray(Q0, dtype=float),
        np.ascontiguousarray(R0, dtype=float),
        adaptive,
        tau,
        float(PROCESS_NOISE_SHARE),
        EIG_FLOOR,
        CLIP_FACTOR,
    )
    status = out[0]
    if status >= 0:
        raise FilterDivergenceError(int(status))
    return FilterRun(
        posterior_means=out[1],
        posterior_covs=out[2],
        prior_means=out[3],
        predicted_obs=out[4],
        innovations=out[5],
        trace_q=out[6],
        trace_r=out[7],
        Q_final=out[8],
        R_final=out[9],
        ensemble_size=E,
    )
