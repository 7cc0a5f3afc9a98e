"""Exception hierarchy shared across the package."""


class AdaptKFError(Exception):
    """Base class for all package errors."""


class DimensionError(AdaptKFError, ValueError):
    pass


class ConfigurationError(AdaptKFError, ValueError):
    pass


class ContractViolation(AdaptKFError, RuntimeError):
    pass


class SingularMatrixError(AdaptKFError, ArithmeticError):
    """Raised when a Cholesky factorization fails even after jitter escalation.

    ``min_pivot`` is the smallest pivot encountered before the failure.
    """

    def __init__(self, message, min_pivot):
        super().__init__(message)
        self.min_pivot = min_pivot


class InsufficientDataError(AdaptKFError, ValueError):
    pass


class CapabilityError(AdaptKFError, TypeError):
    pass


class NumericalAbort(AdaptKFError, FloatingPointError):
    """Training produced a non-finite loss; ``diagnostics`` describes where."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class InputError(AdaptKFError, ValueError):
    pass
