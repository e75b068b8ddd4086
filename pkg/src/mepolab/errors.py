"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands have incompatible shapes or sizes."""


class NotSquareError(ValueError):
    """A square matrix was required."""


class NotSymmetricError(ValueError):
    """Matrix is not symmetric within tolerance."""


class NotPositiveDefiniteError(ValueError):
    """A nonpositive pivot was hit during factorization; raise epsilon."""


class SingularDiagonalError(ValueError):
    """Triangular solve hit a zero diagonal entry."""


class TooFewRowsError(ValueError):
    """Covariance needs at least two rows."""


class TargetNotInMaskError(ValueError):
    """Cross-entropy target class is outside the logit mask."""


class EmptyMaskError(ValueError):
    """Logit mask must contain at least one class."""


class StaleCacheError(ValueError):
    """Forward cache does not match the model it is replayed against."""


class EtaOutOfRangeError(ValueError):
    """Interpolation weight must lie in [0, 1]."""


class InvalidCountError(ValueError):
    """A count or spread parameter is out of range."""


class TooFewClassesError(ValueError):
    """Not enough classes for the requested construction."""


class EmptyDatasetError(ValueError):
    """Dataset contains no samples."""


class InsufficientClassesError(ValueError):
    """Source dataset has fewer classes than requested."""


class InsufficientSamplesError(ValueError):
    """A class has fewer samples than requested."""


class LabelOutOfRangeError(ValueError):
    """A label exceeds the model's output dimension."""


class BatchTooSmallError(ValueError):
    """Batch statistics need at least two samples."""


class EmptyLogError(ValueError):
    """Evaluation log holds no records."""


class EmptyTestSetError(ValueError):
    """Test set holds no samples."""


class MissingRecordsError(ValueError):
    """Per-task accuracy table is missing entries."""


class DegenerateGapError(RuntimeError):
    """All measured gaps are numerically zero; the probe is vacuous."""


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact file does not exist."""


class ConfigError(ValueError):
    """Experiment configuration is malformed."""


class ArtifactIoError(OSError):
    """An artifact file is unreadable or malformed."""
