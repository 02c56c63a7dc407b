"""Exception types shared across the package.

The CLI maps each class to a category label and a nonzero exit code.
"""


class CapganError(Exception):
    category = "error"
    exit_code = 1


class InvalidInputError(CapganError, ValueError):
    category = "invalid-input"
    exit_code = 2


class InvalidStateError(CapganError, RuntimeError):
    category = "invalid-state"
    exit_code = 3


class ConfigError(CapganError, ValueError):
    category = "config"
    exit_code = 4


class InvalidCheckpointError(CapganError):
    category = "invalid-checkpoint"
    exit_code = 5


class CheckpointCorruptError(InvalidCheckpointError):
    category = "corrupt-checkpoint"


class CheckpointNotFoundError(InvalidCheckpointError, FileNotFoundError):
    category = "not-found"


class IncompatibleVersionError(InvalidCheckpointError):
    category = "incompatible-version"


class TrainingDivergedError(CapganError, RuntimeError):
    """Raised when a loss turns non-finite; carries the diagnostic checkpoint path."""

    category = "diverged"
    exit_code = 6

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class NumericSymmetryWarning(UserWarning):
    pass
