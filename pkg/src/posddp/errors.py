"""Exception types shared across the package."""


class PosddpError(Exception):
    """Base class for all package errors."""


class IntegrationError(PosddpError):
    """Adaptive integration exhausted its step budget.

    Carries the last time the integrator reached before giving up.
    """

    def __init__(self, message, t_reached=None):
        super().__init__(message)
        self.t_reached = t_reached


class DivergenceError(PosddpError):
    """NaN/Inf encountered while evaluating the right-hand side."""


class NoiseCovarianceSingularError(PosddpError):
    """Observation noise covariance G_y G_y^T is singular at the evaluation point."""


class IllConditionedBeliefError(PosddpError):
    """A covariance factorization failed even after jitter.

    Carries the condition number estimate of the offending matrix.
    """

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class InvariantViolationError(PosddpError):
    """A state violated a structural invariant (e.g. covariance not PSD)."""


class SweepFailureError(PosddpError):
    """Backward sweep produced non-finite expansion coefficients."""


class InsufficientSamplesError(PosddpError):
    """Too few valid Monte Carlo samples for the requested statistic."""


class ConfigError(PosddpError):
    """Malformed or inconsistent run configuration."""

    def __init__(self, message, location=None):
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location
