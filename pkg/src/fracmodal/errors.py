"""Exception types shared across the package."""


class FracmodalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FracmodalError, ValueError):
    """Shapes or sizes of the inputs are inconsistent with the operation."""


class SymmetryError(FracmodalError, ValueError):
    """A matrix required to be symmetric is not."""


class IterationLimitError(FracmodalError, RuntimeError):
    """An iterative solver failed to converge."""


class DegenerateVectorError(FracmodalError, ValueError):
    """A vector with (near-)zero norm where a direction is required."""


class UnsupportedOpError(FracmodalError, RuntimeError):
    """The reverse sweep hit a node with no registered gradient rule."""


class DegenerateBatchError(FracmodalError, ValueError):
    """A mini-batch lacks the samples an operation needs (e.g. no label peer)."""


class IncompleteSampleError(FracmodalError, ValueError):
    """A training sample is missing a required modality."""


class ConfigError(FracmodalError, ValueError):
    """Invalid or unknown configuration key/value."""


class FormatError(FracmodalError, ValueError):
    """Malformed binary file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibilityError(FracmodalError, ValueError):
    """Checkpoint and dataset disagree on dimensions or categories."""


class InvariantError(FracmodalError, RuntimeError):
    """An instrumented internal invariant failed at runtime."""


class RangeError(FracmodalError, ValueError):
    """A label or index is outside the configured range."""


