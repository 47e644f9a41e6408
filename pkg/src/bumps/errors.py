"""Exception types shared across the package.

The CLI maps these onto distinct exit codes; library code raises them
directly.
"""


class ContextRangeError(ValueError):
    """Kick target distance outside the supported [7, 18] m interval."""


class ShapeError(ValueError):
    """Array dimension mismatch (actions, observations, parameters)."""


class LifecycleError(RuntimeError):
    """Episode API misuse, e.g. stepping a finished episode."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataIntegrityError(RuntimeError):
    """Persisted artifact missing, malformed, or failing its content hash."""


class TrainingFault(RuntimeError):
    """Non-finite losses or gradients during optimization."""


class GridMismatchError(ValueError):
    """Reports over different task grids cannot be compared."""
