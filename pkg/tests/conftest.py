"""Shared fixtures: small models and observation series for fast tests."""

import numpy as np
import pytest

from omec.dynamics import ModelSpec, integrate, observe
from omec.harness import build_observation_function


@pytest.fixture(scope="session")
def l63_model():
    return ModelSpec("lorenz63", 3, dt=0.1, substeps=10,
                     process_noise_cov=0.01 * np.eye(3))


@pytest.fixture(scope="session")
def l63_truth(l63_model):
    """Burned-in noisy truth segment, 600 intervals."""
    rng = np.random.default_rng(42)
    x0 = rng.uniform(-1.0, 1.0, 3)
    traj = integrate(l63_model, x0, 1600, rng=rng)
    traj.states = traj.states[1000:]
    return traj


@pytest.fixture(scope="session")
def l63_wrong_g_obs(l63_truth):
    """Observations through the componentwise nonlinear h, R_true = 2 I."""
    h = build_observation_function("sin,shift:-6,cos", 3)
    return observe(l63_truth, h, 2.0 * np.eye(3), rng=np.random.default_rng(43))


@pytest.fixture(scope="session")
def l63_identity_obs(l63_truth):
    """Observations through identity h, R_true = 2 I (correct-g setting)."""
    h = build_observation_function("identity", 3)
    return observe(l63_truth, h, 2.0 * np.eye(3), rng=np.random.default_rng(44))
