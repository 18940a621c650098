"""Exception hierarchy shared by every module.

The CLI maps each category to its own exit code.
"""


class PpoMiError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(PpoMiError, ValueError):
    """Array lengths or shapes do not chain."""

    exit_code = 3


class ConfigError(PpoMiError, ValueError):
    """A configuration value is invalid.

    ``field`` names the offending dotted key when known.
    """

    exit_code = 2

    def __init__(self, message, field=None):
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class UsageError(PpoMiError):
    """An operation was called outside its contract."""

    exit_code = 2


class BudgetError(PpoMiError):
    """The oracle query budget is exhausted."""

    exit_code = 4

    def __init__(self, query_count, query_budget):
        super().__init__(f"query budget exhausted ({query_count}/{query_budget} used)")
        self.query_count = query_count
        self.query_budget = query_budget


class TrainingError(PpoMiError):
    """A classifier failed to reach its accuracy floor."""

    exit_code = 5


class CapabilityError(PpoMiError):
    """The request is beyond what the implementation can do (e.g. grid too large)."""

    exit_code = 6


class DiagnosticsError(PpoMiError, FloatingPointError):
    """A loss or statistic became non-finite during training."""

    exit_code = 7


class ResultsIOError(PpoMiError, OSError):
    """Reading or writing a result/world file failed; carries the path."""

    exit_code = 8

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
