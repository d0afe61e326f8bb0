"""Error types raised across the hgrnet package."""
from typing import Optional


class HGRNetError(Exception):
    """Base class for all package errors."""


class ShapeError(HGRNetError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigurationError(HGRNetError, ValueError):
    """A layer, plan or run configuration is invalid."""


class ContractError(HGRNetError, RuntimeError):
    """An API precondition was violated by the caller."""


class DataError(HGRNetError, ValueError):
    """A dataset on disk or in memory is malformed."""


class CheckpointError(HGRNetError):
    """A checkpoint file cannot be read or does not match the model."""


class MissingCheckpointError(CheckpointError):
    """A training step was started without the checkpoint of an earlier step."""

    def __init__(self, step: str, path: Optional[str] = None):
        self.step = step
        self.path = path
        where = f" (looked for {path})" if path else ""
        super().__init__(f"{step} weights required: run the {step} training step first{where}")


class NumericError(HGRNetError, ArithmeticError):
    """Training diverged or produced a non-finite value."""
