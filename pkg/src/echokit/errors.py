"""Exception types shared across the package."""

from __future__ import annotations


class EchoKitError(Exception):
    """Base class for all echokit errors."""


class ValidationError(EchoKitError):
    """Data, file contents, or arguments violate a documented invariant.

    Carries the full list of violations so callers can report every
    problem at once instead of the first one found.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class RefusalError(EchoKitError):
    """Operation refused by a safety gate (e.g. irregular heart rhythm)."""
