"""Exception types raised across the package.

All inherit ValueError so callers that only care about "bad input" can catch
one thing, while tests and the CLI can distinguish the failure class.
"""


class GridcastError(ValueError):
    """Base class for all package-specific errors."""


class ParseError(GridcastError):
    """A file or config could not be parsed; message names the offending field."""


class DataError(GridcastError):
    """Dataset payload is invalid (NaN/Inf, shape mismatch, bad dtype)."""


class SizingError(GridcastError):
    """A series or split is too short for the requested windows/masking."""


class GeometryError(GridcastError):
    """Patch/grid geometry is inconsistent (bad divisors, shape mismatch)."""


class ConfigError(GridcastError):
    """Run configuration is invalid (unknown key, out-of-range value)."""


class CheckpointError(GridcastError):
    """Checkpoint file is malformed or inconsistent with the requested model."""


class TrainingError(GridcastError):
    """Training diverged or was misconfigured."""

    def __init__(self, message, step=None, last_finite_loss=None):
        super().__init__(message)
        self.step = step
        self.last_finite_loss = last_finite_loss
