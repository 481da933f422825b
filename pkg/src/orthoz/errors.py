"""Exception types shared across the package."""

from __future__ import annotations


class OrthozError(Exception):
    """Base class for all package errors."""


class ContractViolation(OrthozError, ValueError):
    """An argument breaks a documented precondition (shape, range, symmetry)."""


class EvaluationError(OrthozError, ArithmeticError):
    """A function produced a non-finite value."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class SingularMatrix(OrthozError, ArithmeticError):
    """Pivoted elimination hit a pivot below the relative tolerance."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class SingularJacobian(SingularMatrix):
    """The empirical moment Jacobian cannot be inverted."""


class UnsupportedOperation(OrthozError, NotImplementedError):
    """The requested operation is not available for this object."""
