"""Exception types shared across the package."""


class DignError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DignError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(DignError):
    """A caller violated an operation's precondition."""


class ConfigError(DignError):
    """A configuration value is invalid or inconsistent."""


class DatasetError(DignError):
    """A dataset file is malformed or violates an invariant."""


class TrainingError(DignError):
    """Training aborted (non-finite loss or irrecoverable state)."""
