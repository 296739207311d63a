"""Exception types shared across the package.

The CLI maps each class onto a distinct process exit code.
"""


class InvalidParameterError(ValueError):
    """A caller-supplied parameter is out of its valid range."""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


class NumericalError(ArithmeticError):
    """A numerical routine produced an unusable result."""
