"""Exception hierarchy shared by every capsense module."""

from __future__ import annotations


class CapsenseError(Exception):
    """Base class for all library errors."""


class ConfigurationError(CapsenseError, ValueError):
    """Invalid user-facing parameters (resolution, eps grid, radius...)."""


class InvalidShapeError(ConfigurationError):
    """Unknown shape name or non-positive size parameter."""


class InvalidProfileError(ConfigurationError):
    """Unknown or malformed perturbation profile."""


class EvaluationError(CapsenseError):
    """Chart evaluated at a degenerate or out-of-domain parameter pair."""


class PerturbationTooLargeError(CapsenseError):
    """The normal perturbation violates the immersion margin |eps*h*tau| < 1/2."""


class QuadratureMismatchError(CapsenseError):
    """Data bound to one quadrature was combined with another."""


class NearFieldError(CapsenseError):
    """A layer potential was requested too close to the surface."""


class RadiusTooSmallError(ConfigurationError):
    """Far-field sampling radius below the admissible minimum."""


class ConditioningError(CapsenseError):
    """The discrete single-layer system is numerically singular."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class ConditioningWarning(UserWarning):
    """Condition number above the warning threshold."""


class EigensolveError(CapsenseError):
    """The eigenvalue solver failed to converge."""
