"""Exception types shared by the solver packages.

Domain errors (bad input) derive from ValueError, numerical failures from RuntimeError.
"""
from __future__ import annotations


class RegimeError(ValueError):
    """Invalid regime chain definition, state index or age."""


class MarketError(ValueError):
    """Market coefficients that violate (A1)-(A3) at construction time."""


class AdmissibilityError(ValueError):
    """Portfolio fraction outside A_1 = A ∩ U_delta."""


class ConfigError(ValueError):
    """Malformed run configuration."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None) -> None:
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach its tolerance."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its stopping rule."""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingularSystemError(RuntimeError):
    """The implicit linear system of a time step could not be solved."""
