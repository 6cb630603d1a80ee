"""Dynamical models, integration, and synthetic data generation.

The two built-in models are the 3-variable convection system

    dx1/dt = sigma (x2 - x1)
    dx2/dt = x1 (rho - x3) - x2
    dx3/dt = x1 x2 - beta x3

and the cyclic K-node advection-forcing lattice

    dx_i/dt = (a x_{i+1} - x_{i-2}) x_{i-1} - x_i + F .

Both are integrated with classical fourth-order Runge-Kutta using a fixed
number of substeps per observation interval.  Process noise, when present, is
additive Gaussian drawn once per observation interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DimensionMismatchError,
    IntegrationBlowupError,
    InvalidArgumentError,
    InvalidCovarianceError,
    InvalidModelError,
)
from .serialize import read_csv, write_csv

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f

        return wrap


LORENZ63_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
LORENZ96_DEFAULTS = {"a": 1.0, "F": 8.0}


def lorenz63_rhs(x, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    """Time derivative of the 3-variable model; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise DimensionMismatchError(f"state must have 3 components, got {x.shape[-1]}")
    out = np.empty_like(x)
    out[..., 0] = sigma * (x[..., 1] - x[..., 0])
    out[..., 1] = x[..., 0] * (rho - x[..., 2]) - x[..., 1]
    out[..., 2] = x[..., 0] * x[..., 1] - beta * x[..., 2]
    return out


def lorenz96_rhs(x, a=1.0, F=8.0):
    """Time derivative of the cyclic lattice model; broadcasts over leading axes.

    Requires at least 4 nodes; the stencil couples nodes i-2, i-1, i+1
    cyclically.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise InvalidModelError(f"lattice model needs >= 4 nodes, got {x.shape[-1]}")
    return (a * np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(
        x, 1, axis=-1
    ) - x + F


@dataclass
class ModelSpec:
    """Specification of the dynamical model driving a twin experiment.

    Parameters
    ----------
    name : str
        One of ``"lorenz63"``, ``"lorenz96"``, ``"custom"``.
    dim : int
        State dimension n.
    dt : float
        Observation interval; states are recorded every dt.
    params : dict
        Model parameters; merged over the built-in defaults.
    substeps : int
        Runge-Kutta substeps per observation interval.
    process_noise_cov : ndarray or None
        Q_true, additive noise covariance per observation interval.  None
        means zero (fully deterministic truth).
    rhs : callable or None
        Required for ``name="custom"``: rhs(x) -> dx/dt, vectorized over
        leading axes.
    """

    name: str
    dim: int
    dt: float = 0.1
    params: dict = field(default_factory=dict)
    substeps: int = 10
    process_noise_cov: Optional[np.ndarray] = None
    rhs: Optional[Callable] = None

    def __post_init__(self):
        if self.name not in ("lorenz63", "lorenz96", "custom"):
            raise InvalidModelError(f"unknown model name {self.name!r}")
        if self.dim < 1:
            raise InvalidModelError("model dimension must be positive")
        if self.name == "lorenz63":
            if self.dim != 3:
                raise InvalidModelError("lorenz63 has dimension 3")
            self.params = {**LORENZ63_DEFAULTS, **self.params}
        elif self.name == "lorenz96":
            if self.dim < 4:
                raise InvalidModelError("lorenz96 needs dimension >= 4")
            self.params = {**LORENZ96_DEFAULTS, **self.params}
        elif self.rhs is None:
            raise InvalidModelError("custom model requires an rhs callable")
        if self.dt <= 0:
            raise InvalidModelError("observation interval dt must be positive")
        if self.substeps < 1:
            raise InvalidModelError("substeps must be >= 1")
        if self.process_noise_cov is not None:
            q = np.asarray(self.process_noise_cov, dtype=float)
            if q.shape != (self.dim, self.dim):
                raise DimensionMismatchError(
                    f"process noise covariance must be {self.dim}x{self.dim}"
                )
            if not np.allclose(q, q.T, atol=1e-12):
                raise InvalidCovarianceError("process noise covariance not symmetric")
            self.process_noise_cov = q

    def rhs_function(self) -> Callable:
        """Return the rhs with parameters bound."""
        if self.name == "lorenz63":
            p = self.params
            return lambda x: lorenz63_rhs(x, p["sigma"], p["rho"], p["beta"])
        if self.name == "lorenz96":
            p = self.params
            return lambda x: lorenz96_rhs(x, p["a"], p["F"])
        return self.rhs


@dataclass
class Trajectory:
    """States recorded every dt; row k is the state at time t0 + k dt."""

    states: np.ndarray  # (T, n)
    dt: float
    t0: float = 0.0
    model_name: str = "custom"

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))


@dataclass
class ObservationSeries:
    """Observed vectors recorded every dt; row k observed at t0 + k dt."""

    values: np.ndarray  # (T, m)
    dt: float
    t0: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.values))


@njit(cache=True)
def _interval_lorenz63(states, sigma, rho, beta, h, nsub):  # pragma: no cover - jit
    out = states.copy()
    for b in range(out.shape[0]):
        x0 = out[b, 0]
        x1 = out[b, 1]
        x2 = out[b, 2]
        for _ in range(nsub):
            a0 = sigma * (x1 - x0)
            a1 = x0 * (rho - x2) - x1
            a2 = x0 * x1 - beta * x2
            u0 = x0 + 0.5 * h * a0
            u1 = x1 + 0.5 * h * a1
            u2 = x2 + 0.5 * h * a2
            b0 = sigma * (u1 - u0)
            b1 = u0 * (rho - u2) - u1
            b2 = u0 * u1 - beta * u2
            u0 = x0 + 0.5 * h * b0
            u1 = x1 + 0.5 * h * b1
            u2 = x2 + 0.5 * h * b2
            c0 = sigma * (u1 - u0)
            c1 = u0 * (rho - u2) - u1
            c2 = u0 * u1 - beta * u2
            u0 = x0 + h * c0
            u1 = x1 + h * c1
            u2 = x2 + h * c2
            d0 = sigma * (u1 - u0)
            d1 = u0 * (rho - u2) - u1
            d2 = u0 * u1 - beta * u2
            x0 = x0 + h / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
            x1 = x1 + h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
            x2 = x2 + h / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
        out[b, 0] = x0
        out[b, 1] = x1
        out[b, 2] = x2
    return out


@njit(cache=True)
def _interval_lorenz96(states, a, F, h, nsub):  # pragma: no cover - jit
    out = states.copy()
    K = out.shape[1]
    k1 = np.empty(K)
    k2 = np.empty(K)
    k3 = np.empty(K)
    k4 = np.empty(K)
    u = np.empty(K)
    for b in range(out.shape[0]):
        x = out[b]
        for _ in range(nsub):
            for i in range(K):
                k1[i] = (a * x[(i + 1) % K] - x[(i - 2) % K]) * x[(i - 1) % K] - x[i] + F
            for i in range(K):
                u[i] = x[i] + 0.5 * h * k1[i]
            for i in range(K):
                k2[i] = (a * u[(i + 1) % K] - u[(i - 2) % K]) * u[(i - 1) % K] - u[i] + F
            for i in range(K):
                u[i] = x[i] + 0.5 * h * k2[i]
            for i in range(K):
                k3[i] = (a * u[(i + 1) % K] - u[(i - 2) % K]) * u[(i - 1) % K] - u[i] + F
            for i in range(K):
                u[i] = x[i] + h * k3[i]
            for i in range(K):
                k4[i] = (a * u[(i + 1) % K] - u[(i - 2) % K]) * u[(i - 1) % K] - u[i] + F
            for i in range(K):
                x[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return out


def _interval_generic(rhs, states, h, nsub):
    x = states
    for _ in range(nsub):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def propagate_states(model: ModelSpec, states: np.ndarray) -> np.ndarray:
    """Propagate states deterministically over one observation interval.

    Parameters
    ----------
    states : ndarray, shape (n,) or (B, n)
        One state or a batch; members propagate independently and in order.

    Returns
    -------
    ndarray of the same shape.
    """
    x = np.asarray(states, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise DimensionMismatchError(
            f"states have dimension {x.shape[1]}, model has {model.dim}"
        )
    h = model.dt / model.substeps
    with np.errstate(over="ignore", invalid="ignore"):
        if _HAVE_NUMBA and model.name == "lorenz63":
            p = model.params
            out = _interval_lorenz63(
                np.ascontiguousarray(x), p["sigma"], p["rho"], p["beta"], h, model.substeps
            )
        elif _HAVE_NUMBA and model.name == "lorenz96":
            p = model.params
            out = _interval_lorenz96(
                np.ascontiguousarray(x), p["a"], p["F"], h, model.substeps
            )
        else:
            out = _interval_generic(model.rhs_function(), x, h, model.substeps)
    return out[0] if single else out


def integrate(
    model: ModelSpec,
    x0: np.ndarray,
    num_steps: int,
    rng=None,
) -> Trajectory:
    """Integrate the model and record num_steps states, one per interval.

    The first recorded row is the state after one full interval from x0; x0
    itself is not part of the output.  When the model carries process noise,
    a Gaussian draw with covariance Q_true is added after each interval and
    participates in the subsequent evolution.

    Parameters
    ----------
    rng : int, numpy Generator, or None
        Source for the process noise.  Ignored when Q_true is zero.

    Raises
    ------
    IntegrationBlowupError
        If the state becomes non-finite, reporting the interval index.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.dim,):
        raise DimensionMismatchError(f"x0 must have shape ({model.dim},)")
    if num_steps < 1:
        raise InvalidArgumentError("num_steps must be >= 1")
    q = model.process_noise_cov
    noisy = q is not None and np.any(q != 0.0)
    sq = None
    if noisy:
        rng = np.random.default_rng(rng)
        sq = spd_sqrt(q)
    states = np.empty((num_steps, model.dim))
    x = x0
    for k in range(num_steps):
        x = propagate_states(model, x)
        if noisy:
            x = x + sq @ rng.standard_normal(model.dim)
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowupError(k)
        states[k] = x
    return Trajectory(states=states, dt=model.dt, t0=model.dt, model_name=model.name)


def spd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via singular value decomposition.

    The input is symmetrized and any negative eigenvalues are clipped at zero
    before taking the root; eigenvalue signs are recovered from the SVD
    factors so a single decomposition serves both steps.
    """
    c = np.asarray(cov, dtype=float)
    c = 0.5 * (c + c.T)
    if not np.all(np.isfinite(c)):
        raise InvalidCovarianceError("covariance contains non-finite entries")
    u, s, vt = np.linalg.svd(c)
    # sign of eigenvalue i is the alignment of the i-th left/right vectors
    signs = np.sum(u * vt.T, axis=0)
    lam = np.where(signs > 0.0, s, 0.0)
    return (u * np.sqrt(lam)) @ u.T


def observe(
    trajectory: Trajectory,
    obs_fn,
    noise_cov: np.ndarray,
    rng=None,
) -> ObservationSeries:
    """Map a trajectory through an observation function and add noise.

    y_k = h(x_k) + v_k with v_k ~ N(0, noise_cov), drawn row by row from a
    seeded generator; noise_cov = 0 reproduces h(x_k) exactly.
    """
    vals = np.asarray(obs_fn(trajectory.states), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    r = np.asarray(noise_cov, dtype=float)
    if r.shape != (vals.shape[1], vals.shape[1]):
        raise DimensionMismatchError(
            f"noise covariance must be {vals.shape[1]}x{vals.shape[1]}"
        )
    if np.any(r != 0.0):
        rng = np.random.default_rng(rng)
        sq = spd_sqrt(r)
        vals = vals + rng.standard_normal(vals.shape) @ sq.T
    return ObservationSeries(values=vals, dt=trajectory.dt, t0=trajectory.t0)


def write_trajectory_csv(path, trajectory: Trajectory) -> None:
    n = trajectory.states.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    cols = [trajectory.times] + [trajectory.states[:, i] for i in range(n)]
    write_csv(path, header, cols)


def read_trajectory_csv(path) -> Trajectory:
    header, data = read_csv(path)
    if header[0] != "t" or len(data) < 2:
        raise InvalidArgumentError(f"{path}: not a trajectory file")
    return Trajectory(states=data[:, 1:], dt=data[1, 0] - data[0, 0], t0=data[0, 0])


def write_observations_csv(path, series: ObservationSeries) -> None:
    m = series.values.shape[1]
    header = ["t"] + [f"y{i + 1}" for i in range(m)]
    cols = [series.times] + [series.values[:, i] for i in range(m)]
    write_csv(path, header, cols)


def read_observations_csv(path) -> ObservationSeries:
    header, data = read_csv(path)
    if header[0] != "t" or len(data) < 2:
        raise InvalidArgumentError(f"{path}: not an observation file")
    return ObservationSeries(values=data[:, 1:], dt=data[1, 0] - data[0, 0], t0=data[0, 0])
