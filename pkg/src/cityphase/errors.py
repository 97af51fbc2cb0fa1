"""Exception hierarchy shared across the package."""


class CityPhaseError(Exception):
    """Base class for all package errors."""


class ValidationError(CityPhaseError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A file does not conform to its documented schema."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(ValidationError):
    """Configuration is missing a field or carries an invalid value."""


class NumericError(CityPhaseError, ArithmeticError):
    """A numerical routine failed (factorization, root finding, fitting)."""
