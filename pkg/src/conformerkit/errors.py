"""Exception hierarchy shared by every module of the package."""


class ConformerKitError(Exception):
    """Base class for all errors raised by conformerkit."""


class DimensionError(ConformerKitError, ValueError):
    """Operand shapes are incompatible."""


class NumericFault(ConformerKitError, FloatingPointError):
    """A public operation produced NaN or Inf while checked mode is on."""


class ContractError(ConformerKitError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ConformerKitError, ValueError):
    """Invalid configuration value.  ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class InputTooShortError(ContractError):
    """Sequence is shorter than the subsampling frontend can consume."""


class CTCInfeasibleError(ContractError):
    """No CTC alignment exists for the target given the number of frames."""


class CheckpointError(ConformerKitError, IOError):
    """Malformed or incompatible checkpoint file."""
