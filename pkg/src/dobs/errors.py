"""Exception types shared across the package."""

from __future__ import annotations


class ObserverError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(ObserverError, ValueError):
    """An argument is outside its documented domain."""


class DimensionMismatch(ObserverError):
    """Matrix or vector shapes are inconsistent."""


class NotPositiveDefinite(ObserverError):
    """A matrix required to be symmetric positive definite is not."""


class RankDeficient(ObserverError):
    """A matrix required to have full rank does not."""


class SingularInformation(ObserverError):
    """An information matrix is singular, so the estimate is undetermined.

    ``node`` identifies the offending node (1-based) when known.
    """

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class MaxIterationsExceeded(ObserverError):
    """An iteration hit its step budget before meeting its tolerance."""

    def __init__(self, message: str, iterations: int, final_delta: float):
        super().__init__(message)
        self.iterations = iterations
        self.final_delta = final_delta


class Diverged(ObserverError):
    """The covariance iteration blew past its divergence threshold."""

    def __init__(self, message: str, iterations: int, norm: float):
        super().__init__(message)
        self.iterations = iterations
        self.norm = norm


class UnknownEstimator(ObserverError, KeyError):
    """An estimator name is not one of the supported estimators."""


class SimulationAborted(ObserverError):
    """An estimator failed mid-run; carries what was simulated so far."""

    def __init__(self, message: str, step: int, estimator: str, partial_trace=None):
        super().__init__(message)
        self.step = step
        self.estimator = estimator
        self.partial_trace = partial_trace
