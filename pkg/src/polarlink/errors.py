"""Exception and warning types shared across the package."""


class DataIntegrityError(ValueError):
    """Raised when receiver-side data contradicts transmitter truth (e.g. a
    detection references a slot that was never sent, or blocks overlap)."""


class UndefinedStatisticError(ValueError):
    """Raised when a statistic is requested on an empty sample (e.g. QBER
    with zero detections). Callers must handle this; it is never silently 0."""


class NoLockError(RuntimeError):
    """Raised when clock recovery cannot find a significant periodicity or an
    unambiguous offset-correlation peak."""


class ConvergenceError(RuntimeError):
    """Raised when a numerical inversion (e.g. of a concentration bound) fails
    to converge within its iteration budget."""


class ConfigError(ValueError):
    """Raised for invalid or unknown scenario-configuration content."""


class UnsupportedFigureError(ValueError):
    """Raised when a report does not contain the series a figure needs."""


class SaturationWarning(UserWarning):
    """Emitted when expected per-detector click rates approach the dead-time
    ceiling (rate * dead_time >= 1); results remain valid but rate-limited."""


class DegradedLockWarning(UserWarning):
    """Emitted when slot-assignment residuals exceed a quarter period."""
