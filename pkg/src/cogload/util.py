"""Shared warning category and small helpers."""

from __future__ import annotations

import warnings


class NumericsWarning(UserWarning):
    """Raised when an operation hits a documented degenerate case and falls back."""


def flag(message: str) -> None:
    """Emit a NumericsWarning attributed to the caller."""
    warnings.warn(message, NumericsWarning, stacklevel=3)
