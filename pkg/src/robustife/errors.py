"""Exception types shared across the package.

Every error carries a ``category`` used by the command line front end to
build its ``error:<category>:`` prefix and pick an exit code.
"""


class RobustIfeError(Exception):
    category = "error"


class DataError(RobustIfeError, ValueError):
    """Malformed or inconsistent input data."""

    category = "data"


class NumericalError(RobustIfeError, ArithmeticError):
    """A numerical routine could not produce a valid answer."""

    category = "numerical"
