"""Exception types shared across the package."""


class RevGANError(Exception):
    """Base class for all errors raised by revgan3d."""


class ShapeError(RevGANError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(RevGANError, ValueError):
    """A model, core or training configuration is invalid."""


class TapeStateError(RevGANError, RuntimeError):
    """The gradient tape was used in an invalid state (e.g. consumed twice)."""


class NumericFault(RevGANError, FloatingPointError):
    """An op produced NaN or Inf values."""

    def __init__(self, message, op_id=None):
        super().__init__(message)
        self.op_id = op_id


class FormatError(RevGANError, ValueError):
    """A volume or checkpoint file is malformed."""
