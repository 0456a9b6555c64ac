"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SismapError(Exception):
    exit_code = 1


class InvalidInputError(SismapError, ValueError):
    exit_code = 2


class DataIOError(SismapError, OSError):
    exit_code = 3

    def __init__(self, message, path=None):
        super().__init__(message)
        self.filename = path

    def __str__(self):
        return str(self.args[0])


class CapacityError(SismapError):
    exit_code = 4


class NumericalError(SismapError, ArithmeticError):
    exit_code = 5


class EstimationError(SismapError):
    exit_code = 6


class MeshError(SismapError):
    exit_code = 7


class UndefinedCorrelationError(SismapError, ValueError):
    exit_code = 8


class DegeneratePosteriorError(NumericalError):
    """Log posterior is -inf at the start state (e.g. zero background rate
    with unexplained outbreaks)."""
