"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: configuration and parse
problems exit 2, numerical aborts exit 3.
"""


class ServolagError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ServolagError):
    """Invalid configuration: inconsistent shapes, options, or file headers."""


class ParseError(ConfigError):
    """A file (dataset, parameters, config) could not be parsed."""


class NumericalError(ServolagError):
    """A numerical operation failed: singular solve, NaN loss, step underflow."""
