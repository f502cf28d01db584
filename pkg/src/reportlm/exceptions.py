"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so library code raises the most
specific class that applies instead of a bare ``ValueError``.
"""

from sklearn.exceptions import NotFittedError


class ReportLMError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ReportLMError, ValueError):
    """Bad input values or configuration."""


class ShapeError(ValidationError):
    """Array or tensor dimensions do not agree."""


class StateError(ReportLMError, RuntimeError):
    """An object was used in a state that does not support the call."""


class NotTrainedError(StateError, NotFittedError):
    """Prediction was requested from an estimator with no weights."""


class UndefinedMetricError(ValidationError):
    """A metric has no defined value for the given labels (e.g. one class)."""


class ContainerError(ReportLMError):
    """A model container is malformed or fails an integrity check."""


class HashMismatchError(ContainerError):
    """A container was built against a different vocabulary or encoder."""

    def __init__(self, what, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f"{what} hash mismatch: expected {expected}, found {found}")
