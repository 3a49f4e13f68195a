"""Exception types shared across the toolkit."""


class Av2tError(Exception):
    """Base class for all toolkit-specific errors."""


class DimensionError(Av2tError, ValueError):
    """A tensor or vector has a shape incompatible with the operation."""


class BackendUnavailableError(Av2tError, RuntimeError):
    """A pretrained backend asset is missing; never silently fall back to stubs."""


class ConventionError(Av2tError, ValueError):
    """A dataset tree violates split/annotation conventions.

    Carries the per-clip violation strings in ``violations``.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DatasetError(Av2tError, ValueError):
    """A dataset file could not be decoded into a valid clip component."""


class ConfigKeyError(Av2tError, KeyError):
    """An override references a config key that does not exist."""


class CheckpointFormatError(Av2tError, RuntimeError):
    """Checkpoint file is unreadable, truncated, or has the wrong format version."""


class TrainingDivergedError(Av2tError, RuntimeError):
    """Training hit a non-finite loss; a diagnostic dump was written."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)
