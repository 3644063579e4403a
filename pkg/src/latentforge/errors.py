"""Exception hierarchy shared across the framework.

Exit-code mapping used by the CLI: ConfigError -> 2, DependencyError -> 3,
DivergenceError / IntegrityError -> 4.
"""


class LatentForgeError(Exception):
    """Base class for all framework errors."""


class ConfigError(LatentForgeError, ValueError):
    """Invalid configuration value; message names the offending field."""


class ShapeError(LatentForgeError, ValueError):
    """Tensor shape mismatch between operands."""


class StepRangeError(LatentForgeError, IndexError):
    """Timestep index outside the schedule."""


class StepOrderError(LatentForgeError, ValueError):
    """Reverse-process step pair is not strictly decreasing."""


class UsageError(LatentForgeError, ValueError):
    """Caller-side misuse (e.g. regime/spec mismatch)."""


class DependencyError(LatentForgeError, RuntimeError):
    """A required external resource or artifact is unavailable."""


class DivergenceError(LatentForgeError, RuntimeError):
    """Training produced non-finite or runaway values."""


class IntegrityError(LatentForgeError, RuntimeError):
    """Stored artifact failed a checksum or structural validation."""


class EmptyFrameError(LatentForgeError, ValueError):
    """Projection produced no visible points."""
