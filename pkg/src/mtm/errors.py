"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Run configuration failed to parse or validate."""


class CheckpointError(IOError):
    """Checkpoint file is malformed, truncated, or wrong version."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. non-finite loss)."""
