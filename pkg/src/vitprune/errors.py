"""Exception types shared across the package."""


class VitPruneError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VitPruneError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(VitPruneError):
    """A configuration value is missing, unknown, or out of range."""


class StateError(VitPruneError):
    """An operation was requested on a model in the wrong state."""


class UsageError(VitPruneError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class CheckpointError(VitPruneError):
    """A checkpoint file is malformed, truncated, or inconsistent."""


class NumericalError(VitPruneError):
    """Training produced a non-finite value and was aborted."""
