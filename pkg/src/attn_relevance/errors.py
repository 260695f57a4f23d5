"""Exception hierarchy.

The CLI maps each family to its own exit status, so library code raises the
most specific class available instead of a bare ``ValueError``.
"""


class AttnRelevanceError(Exception):
    """Base class for every error raised by this package."""


class RejectedInput(AttnRelevanceError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class ConfigError(AttnRelevanceError, ValueError):
    """A model or run configuration is invalid or inconsistent with the data."""


class TraceError(AttnRelevanceError, ValueError):
    """A forward trace does not fit the architecture it is interpreted under."""


class PropagationOrderError(AttnRelevanceError, RuntimeError):
    """Gradients were requested before ``backward_fill`` populated them."""


class NumericError(AttnRelevanceError, ArithmeticError):
    """A computation produced NaN or infinity."""


class OracleFailure(NumericError):
    """The finite-difference oracle evaluated to a non-finite value."""


class TrainingError(NumericError):
    """Training diverged."""
