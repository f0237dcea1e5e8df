"""Exception types shared across the package."""


class WTASpikeError(Exception):
    """Base class for all package errors."""


class DimensionError(WTASpikeError, ValueError):
    """Operand shapes are incompatible."""


class InputError(WTASpikeError, ValueError):
    """An argument value is outside its documented domain."""


class ContractError(WTASpikeError, RuntimeError):
    """A caller or a registered rule broke an operation's contract."""


class CheckpointError(WTASpikeError):
    """A checkpoint file could not be read or does not match expectations."""


class ConfigError(WTASpikeError, ValueError):
    """A configuration file or value failed validation."""


class TrainingAborted(WTASpikeError, RuntimeError):
    """Training stopped on a non-finite loss or gradient."""


class EmptySelectionWarning(UserWarning):
    """A loss was requested over an empty set of positions."""
