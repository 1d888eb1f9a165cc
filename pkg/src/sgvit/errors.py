"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``sgvit.cli``).
"""


class SGViTError(Exception):
    """Base class for all package errors."""


class ContractError(SGViTError, ValueError):
    """A caller violated a documented precondition (shape, range, ...)."""


class NumericError(SGViTError, ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


class InvalidQueryError(ContractError):
    """A text query is empty or otherwise unusable."""


class DatasetError(SGViTError):
    """Malformed dataset record or label outside the known vocabulary."""


class ConfigError(SGViTError):
    """Bad configuration file or flag value."""


class CheckpointError(SGViTError):
    """Checkpoint file is missing, corrupt or truncated."""


class TrainingError(NumericError):
    """A loss component became non-finite during training."""
