"""Exception hierarchy shared by every module."""


class GateraError(Exception):
    """Base class for all errors raised by gatera_lab."""


class DimensionError(GateraError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(GateraError, ValueError):
    """A value lies outside the domain of a function (e.g. log of 0)."""


class ContractError(GateraError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigurationError(GateraError, ValueError):
    """Invalid model, adapter or run configuration."""


class InputError(GateraError, ValueError):
    """Bad user-supplied data such as an out-of-range token id."""


class FrozenInvariantError(GateraError, RuntimeError):
    """Frozen backbone weights changed during fine-tuning."""


class DiagnosticError(GateraError, RuntimeError):
    """Training failed to reach a minimum quality bar."""


class CheckpointFormatError(GateraError, ValueError):
    """A checkpoint file is malformed."""
