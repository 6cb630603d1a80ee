"""Iterative observation model error correction for ensemble filtering.

Observations produced by an unknown map h are assimilated with an assumed map
g; the package alternates an adaptive ensemble Kalman filter with a
delay-coordinate nearest-neighbor reconstruction of the discrepancy
b(x) = h(x) - g(x) until the correction stabilizes.
"""

__version__ = "0.1.0"

from .correction import (
    IterationRecord,
    OmecConfig,
    OmecResult,
    default_threshold,
    iterate,
    negative_log_likelihood,
    raw_residuals,
    solve_correction_system,
)
from .dynamics import (
    ModelSpec,
    ObservationSeries,
    Trajectory,
    integrate,
    lorenz63_rhs,
    lorenz96_rhs,
    observe,
    propagate_states,
    spd_sqrt,
)
from .enkf import (
    FilterConfig,
    FilterRun,
    adapt_noise,
    analysis_step,
    forecast_step,
    make_ensemble,
    run_filter,
)
from .errors import (
    DimensionMismatchError,
    FilterDivergenceError,
    InsufficientDataError,
    IntegrationBlowupError,
    InvalidArgumentError,
    InvalidCovarianceError,
    InvalidModelError,
    NumericalFailureError,
    OmecError,
)
from .harness import (
    Report,
    ScenarioConfig,
    build_observation_function,
    preset,
    rmse,
    run_scenario,
    sweep,
)
from .observation import (
    ComponentwiseObservation,
    CorrectedObservationFunction,
    CorrectionTable,
    CustomObservation,
    DelayIndex,
    IdentityObservation,
    LinearObservation,
    LocalizedDelayIndex,
    ObservationFunction,
    build_delay_index,
    knn_query,
    localized_smooth,
    neighbor_weights,
    smooth_residuals,
)

__all__ = [name for name in dir() if not name.startswith("_")]
