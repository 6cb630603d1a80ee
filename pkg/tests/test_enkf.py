"""Sigma-point ensemble filter: moments, update algebra, noise adaptation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import omec._fastpath as fastpath
import omec.enkf
from omec.dynamics import ModelSpec, integrate, observe
from omec.enkf import (
    FilterConfig,
    adapt_noise,
    analysis_step,
    forecast_step,
    make_ensemble,
    read_covariance_sidecar,
    run_filter,
    write_covariance_sidecar,
)
from omec.errors import (
    DimensionMismatchError,
    FilterDivergenceError,
    InvalidArgumentError,
    InvalidCovarianceError,
)
from omec.observation import (
    CorrectedObservationFunction,
    IdentityObservation,
    LinearObservation,
)


def random_spd(n, seed, scale=1.0):
    a = np.random.default_rng(seed).normal(size=(n, n))
    return scale * (a @ a.T + n * np.eye(n))


# ---------------------------------------------------------------- ensemble


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_ensemble_reproduces_moments(n, seed):
    rng = np.random.default_rng(seed)
    mean = rng.normal(size=n)
    cov = random_spd(n, seed + 1)
    ens = make_ensemble(mean, cov, 2 * n + 1)
    assert np.allclose(ens.mean(axis=0), mean, atol=1e-12)
    d = ens - ens.mean(axis=0)
    sample = d.T @ d / len(ens)
    assert np.allclose(sample, cov, rtol=1e-9, atol=1e-9)


def test_ensemble_scalar_unit_cov():
    # n = 1: members {0, +c, -c} with c = sqrt(3/2) so the 1/E sample
    # covariance is exactly 1
    ens = make_ensemble(np.zeros(1), np.eye(1), 3)
    c = np.sqrt(1.5)
    assert np.allclose(np.sort(ens[:, 0]), [-c, 0.0, c])
    assert np.isclose((ens**2).mean(), 1.0)


def test_ensemble_zero_cov_collapses():
    mean = np.array([1.0, -2.0])
    ens = make_ensemble(mean, np.zeros((2, 2)), 5)
    assert np.allclose(ens, mean)


def test_ensemble_requires_sigma_size():
    with pytest.raises(InvalidArgumentError):
        make_ensemble(np.zeros(3), np.eye(3), 6)
    with pytest.raises(DimensionMismatchError):
        make_ensemble(np.zeros(3), np.eye(2), 7)


# ---------------------------------------------------------------- analysis


def test_scalar_kalman_identity():
    # prior mean 0 and sample variance 1, identity obs, R = 1, y = 2:
    # K = 1/2, posterior mean 1, posterior variance 1/2
    ens = make_ensemble(np.zeros(1), np.eye(1), 3)
    res = analysis_step(ens, ens.copy(), np.array([2.0]),
                        np.zeros((1, 1)), np.eye(1))
    assert np.isclose(res.gain[0, 0], 0.5)
    assert np.isclose(res.posterior_mean[0], 1.0)
    assert np.isclose(res.posterior_cov[0, 0], 0.5)


def test_zero_innovation_keeps_prior_mean():
    rng = np.random.default_rng(3)
    ens = make_ensemble(rng.normal(size=3), random_spd(3, 4), 7)
    ybar = ens.mean(axis=0)
    res = analysis_step(ens, ens.copy(), ybar, np.eye(3) * 0.1, np.eye(3))
    assert np.allclose(res.posterior_mean, ens.mean(axis=0), atol=1e-12)


def test_joseph_form_recomputation():
    # with Q = 0 and a linear observation the update must satisfy the Joseph
    # form P+ = (I - KH) P- (I - KH)^T + K R K^T built from the same sample
    # moments
    rng = np.random.default_rng(5)
    n = 3
    ens = make_ensemble(rng.normal(size=n), random_spd(n, 6), 2 * n + 1)
    H = rng.normal(size=(n, n))
    obs_ens = ens @ H.T
    R = random_spd(n, 7)
    y = rng.normal(size=n)
    res = analysis_step(ens, obs_ens, y, np.zeros((n, n)), R)
    K = res.gain
    ikh = np.eye(n) - K @ H
    joseph = ikh @ res.prior_cov @ ikh.T + K @ R @ K.T
    assert np.allclose(res.posterior_cov, joseph, atol=1e-8)


def test_member_reordering_invariance():
    rng = np.random.default_rng(8)
    ens = make_ensemble(rng.normal(size=3), random_spd(3, 9), 7)
    obs_ens = np.sin(ens)
    y = rng.normal(size=3)
    Q, R = 0.1 * np.eye(3), random_spd(3, 10)
    a = analysis_step(ens, obs_ens, y, Q, R)
    perm = rng.permutation(7)
    b = analysis_step(ens[perm], obs_ens[perm], y, Q, R)
    assert np.allclose(a.posterior_mean, b.posterior_mean, atol=1e-12)
    assert np.allclose(a.posterior_cov, b.posterior_cov, atol=1e-12)


def test_analysis_validates_shapes():
    with pytest.raises(DimensionMismatchError):
        analysis_step(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros(2),
                      np.eye(2), np.eye(2))
    with pytest.raises(DimensionMismatchError):
        analysis_step(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3),
                      np.eye(2), np.eye(2))
    with pytest.raises(InvalidArgumentError):
        analysis_step(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(2),
                      np.eye(2), np.eye(2))


def test_forecast_preserves_member_order(l63_model):
    ens = make_ensemble(np.array([1.0, 1.0, 20.0]), np.eye(3), 7)
    prior, obs_ens = forecast_step(ens, l63_model, IdentityObservation(3))
    from omec.dynamics import propagate_states

    for i in range(7):
        assert np.array_equal(prior[i], propagate_states(l63_model, ens[i]))
    assert np.array_equal(obs_ens, prior)


# -------------------------------------------------------------- adaptation


def test_adapt_noise_freezes_at_infinite_tau():
    Q = np.eye(2)
    R = 2.0 * np.eye(2)
    q2, r2 = adapt_noise(
        np.ones(2), np.ones(2), np.zeros((2, 2)), np.eye(2),
        np.eye(2), Q, R, tau=np.inf,
    )
    assert q2 is Q and r2 is R


def test_adapt_noise_rejects_small_tau():
    with pytest.raises(InvalidArgumentError):
        adapt_noise(np.ones(1), np.ones(1), np.zeros((1, 1)), np.eye(1),
                    np.eye(1), np.eye(1), np.eye(1), tau=1.0)


def test_adapt_noise_outputs_spd_and_bounded():
    rng = np.random.default_rng(11)
    Q = 0.1 * np.eye(3)
    R = 2.0 * np.eye(3)
    innov = rng.normal(size=3)
    q2, r2 = adapt_noise(
        innov, rng.normal(size=3), rng.normal(size=(3, 3)) * 0.3, np.eye(3),
        random_spd(3, 12), Q, R, tau=20.0,
    )
    for m in (q2, r2):
        assert np.allclose(m, m.T, atol=1e-12)
        assert np.linalg.eigvalsh(m).min() >= omec.enkf.EIG_FLOOR * (1 - 1e-9)
    # one EMA step cannot move the trace beyond the clip limit
    assert np.trace(q2) <= np.trace(Q) * (1 + omec.enkf.CLIP_FACTOR / 20.0)


def test_adapt_noise_drops_degenerate_estimates():
    Q = 0.1 * np.eye(2)
    R = np.eye(2)
    # a stored gain far out of scale with the innovations marks a broken
    # linearization; the instantaneous estimates must be dropped whole
    q2, r2 = adapt_noise(
        np.ones(2), np.ones(2), 1e7 * np.ones((2, 2)), np.eye(2),
        1e-6 * np.eye(2), Q, R, tau=10.0,
    )
    assert q2 is Q and r2 is R
    q3, r3 = adapt_noise(
        np.array([np.nan, 1.0]), np.ones(2), np.zeros((2, 2)), np.eye(2),
        np.eye(2), Q, R, tau=10.0,
    )
    assert q3 is Q and r3 is R


def test_filter_freezes_noise_with_infinite_tau(l63_identity_obs, l63_model):
    cfg = FilterConfig(adaptive=True, tau=np.inf, R_init=2.0 * np.eye(3))
    run = run_filter(l63_identity_obs, l63_model, IdentityObservation(3), cfg)
    assert np.allclose(run.trace_q, run.trace_q[0])
    assert np.allclose(run.trace_r, 6.0)


def test_adaptive_recovers_instrument_noise_linear_scalar():
    # weakly damped scalar linear system, true R = 2, true Q = 0.01: the
    # stabilized adaptive R must land in [1.5, 2.5]
    model = ModelSpec(
        "custom", 1, dt=0.1, substeps=2, rhs=lambda x: -0.1 * x,
        process_noise_cov=0.01 * np.eye(1),
    )
    rng = np.random.default_rng(20)
    truth = integrate(model, np.array([1.0]), 5000, rng=rng)
    obs = observe(truth, IdentityObservation(1), 2.0 * np.eye(1),
                  rng=np.random.default_rng(21))
    cfg = FilterConfig(adaptive=True, tau=50.0)
    run = run_filter(obs, model, IdentityObservation(1), cfg)
    stabilized = run.trace_r[len(run.trace_r) // 2 :].mean()
    assert 1.5 <= stabilized <= 2.5


def test_wrong_observation_model_inflates_r(l63_wrong_g_obs, l63_model):
    # with g != h and no correction, the adaptation absorbs the observation
    # model error into R, far above the instrument level trace = 6
    cfg = FilterConfig(adaptive=True, tau=25.0)
    run = run_filter(l63_wrong_g_obs, l63_model, IdentityObservation(3), cfg)
    stabilized = run.trace_r[len(run.trace_r) // 2 :].mean()
    assert stabilized > 18.0


def test_covariances_symmetric_psd_every_step(l63_wrong_g_obs, l63_model):
    run = run_filter(l63_wrong_g_obs, l63_model, IdentityObservation(3),
                     FilterConfig(tau=25.0))
    covs = run.posterior_covs
    assert np.allclose(covs, np.swapaxes(covs, 1, 2), atol=1e-10)
    eig = np.linalg.eigvalsh(covs)
    assert eig.min() >= -1e-8


def test_r_inflation_scales_initial_r(l63_identity_obs, l63_model):
    base = FilterConfig(adaptive=False, R_init=2.0 * np.eye(3))
    inflated = FilterConfig(adaptive=False, R_init=2.0 * np.eye(3),
                            r_inflation=4.0)
    a = run_filter(l63_identity_obs, l63_model, IdentityObservation(3), base)
    b = run_filter(l63_identity_obs, l63_model, IdentityObservation(3), inflated)
    assert np.allclose(b.trace_r, 4.0 * a.trace_r)


def test_filter_config_validation():
    with pytest.raises(InvalidArgumentError):
        FilterConfig(tau=1.0)
    with pytest.raises(InvalidArgumentError):
        FilterConfig(r_inflation=0.0)
    # non-symmetric Q_init rejected at run time
    model = ModelSpec("lorenz63", 3)
    obs = observe(integrate(model, np.ones(3), 30), IdentityObservation(3),
                  np.zeros((3, 3)))
    with pytest.raises(InvalidCovarianceError):
        run_filter(obs, model, IdentityObservation(3),
                   FilterConfig(Q_init=np.arange(9.0).reshape(3, 3)))


def test_filter_divergence_reports_step():
    model = ModelSpec("custom", 1, dt=1.0, substeps=1, rhs=lambda x: x**3)
    vals = np.ones((50, 1))
    from omec.dynamics import ObservationSeries

    obs = ObservationSeries(values=vals, dt=1.0)
    with pytest.raises(FilterDivergenceError) as exc:
        run_filter(obs, model, IdentityObservation(1),
                   FilterConfig(adaptive=False, R_init=np.eye(1),
                                x0_mean=np.array([3.0]), P0=np.eye(1)))
    assert isinstance(exc.value.step, int)


def test_bootstrap_r_is_diagonal_positive(l63_identity_obs, l63_model):
    run = run_filter(l63_identity_obs, l63_model, IdentityObservation(3),
                     FilterConfig(adaptive=False))
    # bootstrapped R stays fixed in a non-adaptive run
    assert np.allclose(run.trace_r, run.trace_r[0])
    assert run.R_final.shape == (3, 3)
    assert np.allclose(run.R_final, np.diag(np.diag(run.R_final)))
    assert np.all(np.diag(run.R_final) > 0)


# ------------------------------------------------------------- determinism


def test_run_filter_bit_identical_replay(l63_wrong_g_obs, l63_model):
    cfg = FilterConfig(tau=25.0)
    a = run_filter(l63_wrong_g_obs, l63_model, IdentityObservation(3), cfg)
    b = run_filter(l63_wrong_g_obs, l63_model, IdentityObservation(3), cfg)
    for field in ("posterior_means", "posterior_covs", "prior_means",
                  "predicted_obs", "innovations", "trace_q", "trace_r",
                  "Q_final", "R_final"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field


def _disable_kernel(monkeypatch):
    monkeypatch.setattr(fastpath, "kernel_supports", lambda *a: False)


def test_compiled_loop_matches_reference(monkeypatch, l63_wrong_g_obs, l63_model):
    from omec.harness import build_observation_function

    table = 0.1 * np.sin(np.arange(600 * 3)).reshape(600, 3)
    fns = [
        IdentityObservation(3),
        CorrectedObservationFunction(IdentityObservation(3), table),
        LinearObservation(np.array([[1.0, 0.5, 0.0],
                                    [0.0, 1.0, 0.5],
                                    [0.5, 0.0, 1.0]])),
        build_observation_function("sin,shift:-6,cos", 3),
        CorrectedObservationFunction(
            build_observation_function("sin,shift:-6,cos", 3), table
        ),
    ]
    cfg = FilterConfig(tau=25.0)
    for fn in fns:
        fast = run_filter(l63_wrong_g_obs, l63_model, fn, cfg)
        with monkeypatch.context() as m:
            m.setattr(fastpath, "kernel_supports", lambda *a: False)
            slow = run_filter(l63_wrong_g_obs, l63_model, fn, cfg)
        for field in ("posterior_means", "posterior_covs", "innovations",
                      "trace_q", "trace_r", "Q_final", "R_final"):
            a, b = getattr(fast, field), getattr(slow, field)
            scale = np.max(np.abs(b)) + 1e-30
            assert np.max(np.abs(a - b)) / scale < 1e-9, fn


def test_kernel_support_predicate(l63_model):
    from omec.harness import build_observation_function

    assert fastpath.kernel_supports(l63_model, IdentityObservation(3))
    assert fastpath.kernel_supports(
        l63_model, build_observation_function("sin,shift:-6,cos", 3)
    )
    custom = ModelSpec("custom", 2, rhs=lambda x: -x)
    assert not fastpath.kernel_supports(custom, IdentityObservation(2))


# ----------------------------------------------------------------- sidecar


def test_covariance_sidecar_roundtrip(tmp_path):
    covs = np.random.default_rng(30).normal(size=(11, 3, 3))
    p = tmp_path / "cov.bin"
    write_covariance_sidecar(p, covs)
    back = read_covariance_sidecar(p)
    assert np.array_equal(back, covs)


def test_covariance_sidecar_rejects_corruption(tmp_path):
    covs = np.zeros((2, 2, 2))
    p = tmp_path / "cov.bin"
    write_covariance_sidecar(p, covs)
    raw = bytearray(p.read_bytes())
    raw[0] = ord("X")
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    with pytest.raises(InvalidArgumentError):
        read_covariance_sidecar(bad)
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(InvalidArgumentError):
        read_covariance_sidecar(trunc)
