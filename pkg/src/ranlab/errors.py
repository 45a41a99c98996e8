"""Shared exception types.

Contract violations are caller bugs (bad shapes, broken preconditions);
numeric failures are runtime conditions (NaN/Inf) that must never pass
silently.
"""


class ContractViolationError(ValueError):
    """A documented precondition or invariant was broken by the caller."""


class NumericFailureError(ArithmeticError):
    """A computation produced NaN/Inf; the message names the failing node."""


class DegenerateEmbeddingError(ContractViolationError):
    """A zero-norm vector reached an operation that requires a direction."""


class UndefinedMetricError(ContractViolationError):
    """A metric is undefined for the given labels (e.g. single-class AUC)."""


class CaptionTransportError(RuntimeError):
    """The caption endpoint could not be reached; message carries retry count."""


class CaptionValidationError(RuntimeError):
    """The caption endpoint answered, but the response failed validation."""


class ConfigValidationError(ValueError):
    """An experiment config is invalid; message lists every offending field."""
