"""Correction loop: residuals, smoothing fixed point, stopping, estimators."""

import numpy as np
import pytest

from omec.correction import (
    OmecConfig,
    default_threshold,
    iterate,
    negative_log_likelihood,
    raw_residuals,
    solve_correction_system,
)
from omec.dynamics import ModelSpec, ObservationSeries
from omec.enkf import FilterConfig, FilterRun
from omec.errors import (
    DimensionMismatchError,
    InvalidArgumentError,
    InvalidCovarianceError,
)
from omec.observation import (
    ComponentwiseObservation,
    DelayIndex,
    IdentityObservation,
)


def fake_run(posterior_means):
    T, n = posterior_means.shape
    return FilterRun(
        posterior_means=posterior_means,
        posterior_covs=np.repeat(np.eye(n)[None], T, axis=0),
        prior_means=posterior_means,
        predicted_obs=posterior_means.copy(),
        innovations=np.zeros((T, n)),
        trace_q=np.full(T, 0.3),
        trace_r=np.full(T, 6.0),
        Q_final=0.1 * np.eye(n),
        R_final=2.0 * np.eye(n),
        ensemble_size=2 * n + 1,
    )


def test_raw_residuals_use_base_function():
    # residuals are always measured against the original g, never against a
    # corrected variant of it
    rng = np.random.default_rng(1)
    ys = rng.normal(size=(30, 2))
    states = rng.normal(size=(30, 2))
    obs = ObservationSeries(values=ys, dt=0.1)
    g = ComponentwiseObservation([("scale", 2.0), ("shift", 1.0)])
    run = fake_run(states)
    out = raw_residuals(obs, run, g)
    assert np.allclose(out, ys - g(states), atol=1e-14)


def test_raw_residuals_length_check():
    obs = ObservationSeries(values=np.zeros((5, 1)), dt=0.1)
    with pytest.raises(DimensionMismatchError):
        raw_residuals(obs, fake_run(np.zeros((6, 1))), IdentityObservation(1))


def test_default_threshold_is_fraction_of_mean_magnitude():
    obs = ObservationSeries(values=np.array([[2.0], [-4.0]]), dt=0.1)
    assert default_threshold(obs) == pytest.approx(3e-3)


def test_omec_config_validation():
    with pytest.raises(InvalidArgumentError):
        OmecConfig(delays=-1)
    with pytest.raises(InvalidArgumentError):
        OmecConfig(num_neighbors=0)
    with pytest.raises(InvalidArgumentError):
        OmecConfig(max_iterations=0)
    with pytest.raises(InvalidArgumentError):
        OmecConfig(localization="global")


def test_stubbed_filter_reaches_fixed_point_immediately():
    # a filter whose state estimate ignores the observation function entirely
    # produces identical raw residuals every pass, so delta_g = 0 at the
    # first comparison and the loop stops early
    rng = np.random.default_rng(2)
    ys = rng.normal(size=(60, 2))
    obs = ObservationSeries(values=ys, dt=0.1)
    states = rng.normal(size=(60, 2))
    model = ModelSpec("custom", 2, rhs=lambda x: np.zeros_like(x))

    def stub_filter(observations, model_, obs_fn, cfg):
        return fake_run(states)

    result = iterate(
        obs, model, IdentityObservation(2), FilterConfig(adaptive=False),
        OmecConfig(delays=1, num_neighbors=5, max_iterations=10),
        filter_fn=stub_filter,
    )
    assert result.stopped_early
    assert len(result.iterations) == 2
    assert np.isnan(result.iterations[0].delta_g)
    assert result.iterations[1].delta_g == 0.0
    # the correction table equals the smoothed residuals of the stub output
    assert np.allclose(
        result.final_correction.smoothed, result.first_smoothed, atol=1e-14
    )


def test_iterate_runs_cap_and_records(l63_wrong_g_obs, l63_model):
    cfg = OmecConfig(delays=2, num_neighbors=20, max_iterations=2,
                     threshold=0.0)
    result = iterate(
        l63_wrong_g_obs, l63_model, IdentityObservation(3),
        FilterConfig(tau=25.0), cfg,
    )
    assert not result.stopped_early
    assert [r.index for r in result.iterations] == [0, 1, 2]
    assert result.iterations[1].delta_g > 0.0
    assert result.iterations[0].filter_run is not None  # record_history default
    # raw rows before the first valid delay step are marked absent
    assert np.all(np.isnan(result.final_correction.raw[:2]))
    assert np.all(result.final_correction.smoothed[:2] == 0.0)


def test_iterate_honors_record_history_flag(l63_wrong_g_obs, l63_model):
    cfg = OmecConfig(delays=2, num_neighbors=20, max_iterations=1,
                     threshold=0.0, record_history=False)
    result = iterate(
        l63_wrong_g_obs, l63_model, IdentityObservation(3),
        FilterConfig(tau=25.0), cfg,
    )
    assert result.iterations[0].filter_run is None
    assert result.iterations[0].correction is None
    # scalar diagnostics survive
    assert result.iterations[0].r_trace_stable > 0


def test_iterate_residuals_recomputable_from_history(l63_wrong_g_obs, l63_model):
    # at every recorded iteration, raw = y - g(posterior) against base g even
    # though passes 1+ filtered through a corrected function
    g = IdentityObservation(3)
    result = iterate(
        l63_wrong_g_obs, l63_model, g, FilterConfig(tau=25.0),
        OmecConfig(delays=2, num_neighbors=20, max_iterations=2, threshold=0.0),
    )
    ys = l63_wrong_g_obs.values
    for rec in result.iterations:
        expect = ys - g(rec.filter_run.posterior_means)
        got = rec.correction.raw
        assert np.allclose(got[2:], expect[2:], atol=1e-12)


def test_corrected_function_export(l63_wrong_g_obs, l63_model):
    g = IdentityObservation(3)
    result = iterate(
        l63_wrong_g_obs, l63_model, g, FilterConfig(tau=25.0),
        OmecConfig(delays=2, num_neighbors=20, max_iterations=1, threshold=0.0),
    )
    fn = result.corrected_function(g)
    x = np.zeros((1, 3))
    k = 10
    assert np.allclose(
        fn.at_step(k)(x), result.final_correction.smoothed[k], atol=1e-14
    )


# -------------------------------------------------------- linear estimator


def test_solve_correction_system_identity_rows_before_valid_range():
    rng = np.random.default_rng(3)
    idx = DelayIndex(rng.normal(size=(40, 1)), delays=3)
    targets = rng.normal(size=(40, 1))
    bhat, smoothed, warned = solve_correction_system(idx, targets, 6)
    assert np.allclose(smoothed[:3], bhat[:3], atol=1e-10)


def test_solve_correction_system_reproduces_targets_in_easy_case():
    # the weights matrix is close to row-stochastic with a dominant self
    # weight at small N, so the least squares fit reaches the targets
    rng = np.random.default_rng(4)
    idx = DelayIndex(rng.normal(size=(50, 2)), delays=1)
    targets = rng.normal(size=(50, 2))
    bhat, smoothed, warned = solve_correction_system(idx, targets, 3)
    resid = np.linalg.norm(smoothed[1:] - targets[1:]) / np.linalg.norm(targets[1:])
    assert resid < 0.1


def test_solve_correction_system_shape_check():
    idx = DelayIndex(np.random.default_rng(0).normal(size=(30, 1)), delays=1)
    with pytest.raises(DimensionMismatchError):
        solve_correction_system(idx, np.zeros((29, 1)), 4)


# -------------------------------------------------------------- likelihood


def test_negative_log_likelihood_hand_case():
    from omec.observation import CorrectionTable

    states = np.array([[1.0], [2.0]])
    run = fake_run(states)
    model = ModelSpec("custom", 1, dt=0.1, substeps=1,
                      rhs=lambda x: np.zeros_like(x))
    obs = ObservationSeries(values=np.array([[1.5], [2.5]]), dt=0.1)
    table = CorrectionTable(
        iteration=0,
        raw=np.array([[0.5], [0.5]]),
        smoothed=np.array([[0.1], [0.2]]),
        delays=0,
    )
    Q = np.array([[2.0]])
    R = np.array([[0.5]])
    # obs term: 0.5 * (0.4^2 + 0.3^2) / 0.5 ; dyn term: 0.5 * (2-1)^2 / 2
    expect = 0.5 * (0.16 + 0.09) / 0.5 + 0.5 * 1.0 / 2.0
    got = negative_log_likelihood(run, table, obs, model, Q, R)
    assert got == pytest.approx(expect)


def test_negative_log_likelihood_requires_spd():
    states = np.zeros((3, 1))
    run = fake_run(states)
    model = ModelSpec("custom", 1, rhs=lambda x: np.zeros_like(x))
    obs = ObservationSeries(values=np.zeros((3, 1)), dt=0.1)
    from omec.observation import CorrectionTable

    table = CorrectionTable(
        iteration=0, raw=np.zeros((3, 1)), smoothed=np.zeros((3, 1)), delays=0
    )
    with pytest.raises(InvalidCovarianceError):
        negative_log_likelihood(run, table, obs, model, np.array([[-1.0]]),
                                np.array([[1.0]]))
