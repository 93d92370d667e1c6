"""Exception hierarchy shared by every ftn module."""


class FTNError(Exception):
    """Base class for all errors raised by ftn."""


class DimensionError(FTNError, ValueError):
    """Operand extents are incompatible with an operation."""


class LayoutError(FTNError, ValueError):
    """Spatial extents do not tile the requested grid/stride geometry."""


class ParameterError(FTNError, ValueError):
    """A scalar hyperparameter is out of its legal range."""


class UsageError(FTNError, RuntimeError):
    """An API was called in a state it does not support."""


class NonFiniteError(FTNError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(FTNError, ValueError):
    """A model configuration violates one of its invariants."""


class DataError(FTNError, ValueError):
    """Input data (labels, images, tensor files) is malformed."""


class TrainingError(FTNError, RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


class CheckpointError(FTNError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DerivationError(FTNError, RuntimeError):
    """No variant configuration lands inside the requested budget."""
