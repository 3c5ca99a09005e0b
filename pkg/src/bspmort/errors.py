"""Exception types raised across the package."""


class BSPError(Exception):
    """Base class for all package errors."""


class DomainError(BSPError, ValueError):
    """An argument lies outside the domain of the operation."""


class InputError(BSPError, ValueError):
    """Observations or configuration are inconsistent with the model."""


class ParseError(BSPError, ValueError):
    """A data file does not follow the expected layout."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(BSPError, ArithmeticError):
    """A matrix factorization failed even after regularization."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class EstimationError(BSPError, RuntimeError):
    """No optimizer start produced a finite likelihood."""
