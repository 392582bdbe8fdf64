"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class ConfigError(ValueError):
    """Invalid configuration. ``field`` holds the dotted path of the offender."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ContaminationError(RuntimeError):
    """Ground-truth labels reached a code path that must only see images."""
