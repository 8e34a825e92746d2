"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit with 2,
numeric failures with 3 and too many failed simulations with 4.
"""


class NewtonInferError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(NewtonInferError, ValueError):
    """A function was called with arguments outside its contract."""

    exit_code = 2


class ConfigError(NewtonInferError, ValueError):
    """A configuration value is missing, unknown or violates a constraint."""

    exit_code = 2

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class NumericError(NewtonInferError, ArithmeticError):
    """Non-finite values or failed convergence."""

    exit_code = 3


class DivergenceError(NumericError):
    pass


class SingularMatrixError(NumericError):
    """A matrix that must be inverted is singular or indefinite."""


class PartialFailureError(NewtonInferError):
    """Too many simulations in a batch failed."""

    exit_code = 4
