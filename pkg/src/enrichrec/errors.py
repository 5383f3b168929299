class ConfigError(ValueError):
    """Bad configuration: wrong shapes, unknown keys, illegal hyperparameters."""


class InputError(ValueError):
    """Bad data handed to a kernel or reader (out-of-range ids, malformed files)."""


class CheckpointError(RuntimeError):
    """Corrupt or mismatched checkpoint."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
