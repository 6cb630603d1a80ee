"""Error types shared across the package.

Every raised condition carries an actionable message; errors that occur at a
specific filter or integration step report that step index.
"""


class OmecError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(OmecError, ValueError):
    """An argument violates a documented precondition."""


class InvalidModelError(OmecError, ValueError):
    """A model specification is inconsistent (unknown name, bad dimension...)."""


class InvalidCovarianceError(OmecError, ValueError):
    """A covariance input is not symmetric positive (semi)definite as required."""


class DimensionMismatchError(OmecError, ValueError):
    """Array shapes do not agree with the declared dimensions."""


class InsufficientDataError(OmecError, ValueError):
    """Not enough samples for the requested operation (embedding, neighbors)."""


class IntegrationBlowupError(OmecError, ArithmeticError):
    """Non-finite state encountered during integration.

    Parameters
    ----------
    step : int
        Observation-interval index at which the state first became non-finite.
    """

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state after integration step {step}")


class FilterDivergenceError(OmecError, ArithmeticError):
    """Filter state or covariance became non-finite.

    Parameters
    ----------
    step : int
        Filter step index at which divergence was detected.
    """

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"filter diverged at step {step}")


class NumericalFailureError(OmecError, ArithmeticError):
    """A linear-algebra routine failed beyond recovery."""
