"""Exception types shared across the package."""


class BlockCacheError(Exception):
    """Base class for package-specific failures."""


class ConfigError(BlockCacheError, ValueError):
    """Invalid configuration value or malformed config file."""


class DimensionError(BlockCacheError, ValueError):
    """Tensor arguments with incompatible or illegal shapes."""


class ScheduleError(BlockCacheError, RuntimeError):
    """Step schedule violated at execution time (e.g. reuse before any cache)."""


class CompletenessError(BlockCacheError, KeyError):
    """A feature log is missing records required by an analysis."""


class SingularityError(BlockCacheError, ZeroDivisionError):
    """A formula was evaluated at a point where it is undefined."""


class TrainingError(BlockCacheError, RuntimeError):
    """Policy training diverged or received non-finite inputs."""
