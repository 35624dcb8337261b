"""Exception types shared across the package.

Each maps to a CLI exit code: usage problems exit 1, data problems exit 2,
numerical failures exit 3.
"""


class SemlocError(Exception):
    exit_code = 1


class ConfigError(SemlocError, ValueError):
    exit_code = 1


class DataError(SemlocError):
    exit_code = 2


class NumericalError(SemlocError, ArithmeticError):
    exit_code = 3


class GeometryError(NumericalError):
    pass
