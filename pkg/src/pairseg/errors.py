"""Exception types shared across the package.

The CLI maps each family to a distinct exit code, so keep the hierarchy
flat and explicit.
"""


class PairsegError(Exception):
    """Base class for all package-specific errors."""


class GridFormatError(PairsegError):
    """Malformed or unsupported GRID file (bad magic, dtype, truncation)."""


class ShapeError(PairsegError):
    """Input arrays have inconsistent or unsupported dimensions."""


class LabelRangeError(PairsegError):
    """A label index is outside [0, classes)."""


class SingularFeatureError(PairsegError):
    """A pixel feature vector has zero norm; cosine similarity undefined."""


class DegenerateRowError(PairsegError):
    """An affinity row cannot be normalized (all mass would cancel)."""


class DegenerateDistributionError(PairsegError):
    """A class distribution or NTM does not support the requested operation."""


class InsufficientSamplesError(PairsegError):
    """Monte-Carlo estimate has an empty conditioning bucket."""


class ConfigError(PairsegError):
    """Invalid experiment or training configuration."""


class NonFiniteLossError(PairsegError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})
