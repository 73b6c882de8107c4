"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration (bad shapes, ranges, rigs)."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain."""


class StageError(RuntimeError):
    """Runtime failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
