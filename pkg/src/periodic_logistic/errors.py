"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class PeriodicLogisticError(Exception):
    """Base class for every error raised by the package."""


class InvalidMeshError(PeriodicLogisticError):
    pass


class RejectedInputError(PeriodicLogisticError):
    pass


class NotEllipticError(PeriodicLogisticError):
    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = offending if offending is not None else []


class SolverError(PeriodicLogisticError):
    pass


class NumericalBlowupError(SolverError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NoPositiveSolutionError(PeriodicLogisticError):
    pass


class EigenIterationError(SolverError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InsufficientLadderError(PeriodicLogisticError):
    pass


class InvalidRequestError(PeriodicLogisticError):
    pass


class DivisionGuardError(PeriodicLogisticError):
    pass


class DomainError(PeriodicLogisticError):
    pass


class OutOfRangeError(PeriodicLogisticError):
    pass


class SupersolutionFailure(SolverError):
    pass


class MonotonicityFailure(SolverError):
    pass


class CannotDifferentiateError(PeriodicLogisticError):
    pass


class StepRejectedError(SolverError):
    pass


class CertificateFailure(PeriodicLogisticError):
    pass


class ConfigError(PeriodicLogisticError):
    """Invalid run configuration."""


class ConfigParseError(ConfigError):
    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}, column {column})"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class PeriodicityError(ConfigError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class MissingFieldError(ConfigError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
