"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes: ``ConfigError`` -> 2,
``OSError`` -> 3, ``ContractError`` (and ``DimensionError``) -> 4.
"""


class VolDiTError(Exception):
    """Base class for all package errors."""


class ConfigError(VolDiTError):
    """Invalid hyperparameters or inconsistent configuration."""


class ContractError(VolDiTError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes or spatial extents are incompatible."""
