"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class CxrlmError(Exception):
    pass


class DataError(CxrlmError, ValueError):
    """Malformed or invalid input data (files, documents, configs)."""


class NumericError(CxrlmError, ArithmeticError):
    """Non-finite values, divergence, or a failed gradient check."""
