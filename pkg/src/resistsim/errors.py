"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller supplied a value outside an operation's domain."""


class DataError(Exception):
    """A dataset or field file could not be read or is inconsistent."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""
