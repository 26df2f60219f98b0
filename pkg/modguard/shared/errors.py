"""Exception hierarchy for modguard."""


class ModguardError(Exception):
    """Base class for every modguard error."""


class UnsupportedModulationError(ModguardError, ValueError):
    """Requested modulation has no generator."""


class ShapeMismatchError(ModguardError, ValueError):
    """Tensor or feature dimensions do not match the model."""


class InvalidSmoothingError(ModguardError, ValueError):
    """Label-smoothing weight would leave the probability simplex."""


class CalibrationError(ModguardError, ValueError):
    """Threshold calibration cannot be performed on the given scores."""


class DegenerateTrainingSetError(ModguardError, ValueError):
    """Training data lacks the classes a model needs."""


class EmptyDatasetError(ModguardError, ValueError):
    """An operation received no frames."""


class NonFiniteGradientError(ModguardError, ArithmeticError):
    """An attack produced a NaN or infinite gradient."""


class ArtifactFormatError(ModguardError, ValueError):
    """A binary artifact cannot be decoded."""


class MalformedHeaderError(ArtifactFormatError):
    """Magic bytes or header fields are missing or inconsistent."""


class TruncatedPayloadError(ArtifactFormatError):
    """The file ends before the declared payload does."""


class VersionMismatchError(ArtifactFormatError):
    """The file belongs to another version of the format."""
