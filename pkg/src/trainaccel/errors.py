class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class FormatError(ValueError):
    """A binary dataset record or file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses for an entire epoch."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
