"""Exception types shared across the package.

Every error raised on purpose derives from GraphModelError so callers
(and the CLI) can catch one base class and turn it into a nonzero exit.
"""


class GraphModelError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GraphModelError):
    """Operands have incompatible or unexpected shapes."""


class NumericError(GraphModelError):
    """A value that must be finite is NaN or infinite."""


class ConfigError(GraphModelError):
    """A configuration value is out of its legal range."""


class ValidationError(GraphModelError):
    """Input data violates a documented contract."""
