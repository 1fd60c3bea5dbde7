"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each failure class has exactly one
home: configuration problems, numeric blow-ups, file/format problems.
"""


class BagstormError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BagstormError, ValueError):
    """Invalid configuration, bad shapes, or an API used out of contract."""


class UsageError(ConfigurationError):
    """An operation was called with arguments outside its preconditions."""


class ShapeError(ConfigurationError):
    pass


class NumericError(BagstormError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(BagstormError):
    """A file on disk does not match the expected schema or version."""


class IntegrityError(BagstormError):
    """Cached state no longer matches the data it was derived from."""


class UndefinedMetricError(BagstormError, ValueError):
    pass
