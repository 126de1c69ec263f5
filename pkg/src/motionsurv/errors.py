"""Exception types shared across the package.

The CLI maps :class:`InputError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""


class InputError(ValueError):
    """Bad user-supplied data or configuration."""


class MalformedInputError(InputError):
    """Input arrays or files violate their declared shape or schema."""


class ConfigError(InputError):
    """A configuration value is out of range or inconsistent."""


class NumericalError(RuntimeError):
    """A numerical procedure failed or produced an undefined result."""


class UndefinedResultError(NumericalError):
    """The requested statistic is undefined for the given data."""


class TrainingError(NumericalError):
    """Model training could not be carried out."""


class StratificationError(NumericalError):
    """No median split exists for the supplied risk scores."""
