"""
Exception hierarchy for the diffusion toolkit.

Every error raised on purpose by the package derives from DiffusionError so the
command surface can turn it into a one-line diagnostic and exit code 1.
"""

from typing import Any, Optional


class DiffusionError(Exception):
    """Base class for all toolkit errors."""

    code = "E_DIFFUSION"


class InvalidArgumentError(DiffusionError, ValueError):
    """An argument is outside the documented domain of an operation."""

    code = "E_INVALID_ARGUMENT"


class UnsupportedOperationError(DiffusionError):
    """The operation does not exist for this diffusion kind."""

    code = "E_UNSUPPORTED"


class KindMismatchError(InvalidArgumentError):
    """Gaussian and binomial objects were mixed."""

    code = "E_KIND_MISMATCH"


class NonFiniteError(DiffusionError, FloatingPointError):
    """A computation produced NaN or infinity.

    Attributes:
        node: label of the first graph node (or bound term) found non-finite
    """

    code = "E_NON_FINITE"

    def __init__(self, message: str, node: Optional[str] = None):
        super().__init__(message)
        self.node = node


class TrainingDivergedError(DiffusionError):
    """Training produced a non-finite bound.

    Attributes:
        last_good: model (and schedule) from the last finite step
        log: training log up to the failure
    """

    code = "E_DIVERGED"

    def __init__(self, message: str, last_good: Any = None, log: Any = None, step: int = 0):
        super().__init__(message)
        self.last_good = last_good
        self.log = log
        self.step = step


class ConfigError(DiffusionError):
    """Malformed run configuration."""

    code = "E_CONFIG"


class RunDirectoryLockedError(DiffusionError):
    """Another process holds the run directory."""

    code = "E_LOCKED"


class CheckpointError(DiffusionError):
    """Unreadable checkpoint."""

    code = "E_CHECKPOINT"


class CheckpointVersionError(CheckpointError):
    code = "E_CHECKPOINT_VERSION"


class CheckpointChecksumError(CheckpointError):
    code = "E_CHECKPOINT_CHECKSUM"


class CheckpointTruncatedError(CheckpointChecksumError):
    """The file ends before its declared payload; the checksum cannot match."""

    code = "E_CHECKPOINT_TRUNCATED"
