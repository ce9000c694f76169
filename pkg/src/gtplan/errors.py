"""Exception types shared across the package."""

from __future__ import annotations


class GtplanError(Exception):
    """Base class for engine errors."""


class DataError(GtplanError):
    """Input data violates a documented invariant."""


class CaseError(DataError):
    """A case file failed to parse or validate; carries all diagnostics."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []

    def __str__(self) -> str:
        base = super().__str__()
        if self.diagnostics:
            return base + "\n" + "\n".join(f"  - {d}" for d in self.diagnostics)
        return base


class DegenerateModelError(GtplanError):
    """A stochastic model parameter combination has no defined behavior."""
