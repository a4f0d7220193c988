"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericError(ValueError):
    """Invalid numeric input (NaN/Inf, log of non-positive, zero norm, ...)."""


class ContractError(ValueError):
    """A caller violated an API precondition."""


class InputError(ValueError):
    """Malformed user-supplied data (files, token ids, ...)."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class CheckpointError(ValueError):
    """Corrupt or unsupported checkpoint file."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries the path of the last good checkpoint when one exists.
    """

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
