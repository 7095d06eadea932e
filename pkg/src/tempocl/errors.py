"""Exception classes shared across the package.

The CLI maps these onto exit codes and one-line error classes, so every
failure mode raised by library code should use one of them (or a builtin).
"""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class BoundsError(IndexError):
    """An index or slice falls outside the valid range."""


class ShapeError(ValueError):
    """A tensor shape is incompatible with the receiving operation."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a zero vector where a direction is needed."""


class CheckpointError(RuntimeError):
    """A checkpoint or export file is missing, corrupt, or of the wrong kind."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
