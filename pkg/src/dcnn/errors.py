"""Exception hierarchy shared across the package."""


class DcnnError(Exception):
    pass


class DimensionError(DcnnError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(DcnnError, ValueError):
    """A model/train/data configuration violates an invariant."""


class DegenerateBatchError(DcnnError, ValueError):
    pass


class UsageError(DcnnError, RuntimeError):
    pass


class NonFiniteError(DcnnError, ArithmeticError):
    pass


class DataError(DcnnError, ValueError):
    """Bad labels or samples handed to a loss or metric."""


class DatasetError(DcnnError, RuntimeError):
    pass


class CheckpointError(DcnnError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint was written for a different model configuration."""


class CorruptCheckpointError(CheckpointError):
    pass
