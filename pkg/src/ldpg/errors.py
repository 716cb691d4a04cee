"""Exception hierarchy shared by every module."""


class LdpgError(Exception):
    """Base class for all library errors."""


class ConfigError(LdpgError):
    """Malformed or schema-violating configuration."""


class DomainError(LdpgError, ValueError):
    """An argument lies outside the domain of an operation."""


class NumericalError(LdpgError, ArithmeticError):
    """Non-finite values or a failed numerical kernel."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InfeasibleError(LdpgError):
    """Constants violate a required strict inequality.

    ``constraint`` names the violated inequality.
    """

    def __init__(self, message, constraint=""):
        super().__init__(message)
        self.constraint = constraint


class EstimationError(LdpgError):
    """Not enough usable data to fit a statistic."""
