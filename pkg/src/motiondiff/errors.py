"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid argument values or mismatched shapes."""


class VideoIOError(OSError):
    """A frame directory or image could not be read or written."""


class NumericError(FloatingPointError):
    """Non-finite values appeared during a computation."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigurationError(ValueError):
    """Checkpoints or configs that cannot work together."""
