"""
Exceptions raised by the watermark design, detection and learning code.

All of them derive from ``ValueError`` so that callers validating user input
can keep catching the built-in type.
"""


class WatermarkError(ValueError):
    """Base class for every error raised by this project."""


class DimensionMismatchError(WatermarkError):
    """An array does not have the shape required by the plant dimensions."""


class UnstableSystemError(WatermarkError):
    """The state transition matrix is not strictly stable."""


class UnstableClosedLoopError(UnstableSystemError):
    """The estimator/controller augmentation produced unstable dynamics."""


class ModelInvariantError(WatermarkError):
    """A plant model violates one of its invariants (stability, PSD, rank)."""


class DegenerateCovarianceError(WatermarkError):
    """A covariance or weight matrix that must be invertible is not."""


class IllConditionedFitError(WatermarkError):
    """The minimal-polynomial normal equations are numerically singular."""

    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


class ClusteredRootsError(WatermarkError):
    """Estimated eigenvalues are too close to separate their residues."""


class ScheduleError(WatermarkError):
    """A replay schedule is inconsistent or steps arrive out of order."""


class TraceParseError(WatermarkError):
    """A stored experiment trace cannot be read back."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number
