"""Exception hierarchy shared by every cpmm module."""

from __future__ import annotations


class CPMMError(Exception):
    """Base class for all package errors."""


class DomainError(CPMMError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class PatternError(CPMMError, ValueError):
    """Unknown or unsupported covariance pattern / model specification."""


class DataError(CPMMError, ValueError):
    """Input data violates the balanced-panel contract."""


class ConfigError(CPMMError, ValueError):
    """A run configuration failed validation."""


class DegenerateError(CPMMError):
    """A numerical update lost positive definiteness or a component emptied.

    Raised inside EM to signal that the current start must be abandoned.
    """


class FitError(CPMMError):
    """Every start of a fit failed."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class InferenceError(CPMMError):
    """The observed information matrix is not positive definite."""


class BalanceError(DataError):
    """A subject does not cover every time label."""


class DuplicateRecordError(DataError):
    """A (subject, time) pair appears more than once."""


class ParseError(DataError):
    """A numeric field could not be parsed as a finite real."""
