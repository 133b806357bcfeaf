# modules/errors.py
"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DrmatchError(Exception):
    exit_code = 1


class UsageError(DrmatchError):
    exit_code = 1


class DataError(DrmatchError, ValueError):
    exit_code = 2


class DegenerateResponseError(DataError):
    pass


class NumericalError(DrmatchError, ArithmeticError):
    exit_code = 3


class NoMatchesError(NumericalError):
    pass
