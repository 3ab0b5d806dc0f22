"""Exception types shared across the toolkit."""


class SqError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteInputError(SqError, ValueError):
    """An input array contains NaN or Inf."""


class InvalidParamsError(SqError, ValueError):
    """Quantization parameters violate their invariants."""


class ShapeMismatchError(SqError, ValueError):
    """Array shapes are inconsistent with each other or with parameters."""


class EmptyBatchError(SqError, ValueError):
    """An activation batch is empty."""


class EmptyVectorError(SqError, ValueError):
    """A vector reduction was asked for on an empty vector."""


class LengthMismatchError(SqError, ValueError):
    """Two vectors that must be paired element-wise differ in length."""


class TooShortError(SqError, ValueError):
    """A statistic needs more elements than were provided."""


class InvalidShapeError(SqError, ValueError):
    """Model dimensions do not satisfy their structural constraints."""


class InvalidProfileError(SqError, ValueError):
    """A salience profile is inconsistent with the model or schedule."""


class GranularityMismatchError(SqError, ValueError):
    """An operation requires a different quantization granularity."""


class ConfigError(SqError, ValueError):
    """A pipeline configuration file is malformed."""


class MissingArtifactError(SqError, FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced."""


class ArtifactLockError(SqError, OSError):
    """The artifact directory is locked by another invocation."""


class ContainerFormatError(SqError, ValueError):
    """A tensor container file is corrupt or has an unknown layout."""
