"""Exception types shared across the package."""


class DepthUpError(Exception):
    """Base class for all package errors."""


class ShapeError(DepthUpError, ValueError):
    pass


class ConfigError(DepthUpError, ValueError):
    pass


class FormatError(DepthUpError):
    pass


class TrainingError(DepthUpError, RuntimeError):
    pass


class UndefinedMetricError(DepthUpError, ValueError):
    """Raised when a masked metric has no valid pixels to average over."""


class SyncError(DepthUpError, ValueError):
    pass
