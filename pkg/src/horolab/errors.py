"""Shared exception types mapped to CLI exit codes."""


class ToleranceFailure(RuntimeError):
    """A numeric check missed its configured tolerance (exit code 2)."""


class BudgetExhausted(RuntimeError):
    """An enumeration or search exceeded its configured budget (exit code 3).

    Carries whatever partial lower-bound information was computed so a
    caller can report it instead of silently truncating.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(ValueError):
    """Malformed configuration (exit code 1); message carries field/line."""
