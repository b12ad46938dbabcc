"""Exception types shared across the package."""


class RFDistillError(Exception):
    """Base class for every error this package raises deliberately."""


class UsageError(RFDistillError):
    """Bad command-line arguments (maps to exit code 2)."""


class EmptyFrameError(RFDistillError):
    """An operation that needs points received an empty frame."""


class NonMonotonicTimestampsError(RFDistillError):
    """Timestamps fed to the windower decreased."""


class ShapeMismatchError(RFDistillError):
    """An array had the wrong shape for the requested operation."""


class ZeroNormEmbeddingError(RFDistillError):
    """Cosine similarity is undefined for a zero-norm embedding."""


class InsufficientSamplesError(RFDistillError):
    """Too few samples for the requested statistic."""


class NoTrainableDataError(RFDistillError):
    """The training pool is empty, or filtering emptied every frame."""


class MissingSupportError(RFDistillError):
    """A class in the anchor set has no (or not enough) support examples."""


class UnknownLabelError(RFDistillError):
    """A sample carries a label that is not in the anchor set."""


class DuplicateClassError(RFDistillError):
    """An anchor file defines the same class name twice."""


class SchemaError(RFDistillError):
    """A data file violates the wire schema; carries the offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
