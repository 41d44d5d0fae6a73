"""Exception hierarchy shared across the package."""


class PlateDiffError(Exception):
    """Base class for every error raised by platediff."""


class ValidationError(PlateDiffError, ValueError):
    """A record violates a domain invariant. ``field`` names the offender."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ParseError(PlateDiffError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingAfterState(PlateDiffError, ValueError):
    pass


class SpecError(PlateDiffError, ValueError):
    pass


class EmptyInput(PlateDiffError, ValueError):
    pass


class BackendUnavailable(PlateDiffError, RuntimeError):
    pass


class ShapeMismatch(PlateDiffError, ValueError):
    pass


class EmptyBatch(PlateDiffError, ValueError):
    pass


class DegenerateInput(PlateDiffError, ValueError):
    pass


class DataError(PlateDiffError, ValueError):
    pass


class CheckpointMismatch(PlateDiffError, ValueError):
    pass


class OrphanItem(PlateDiffError, KeyError):
    pass


class EmptyReport(PlateDiffError, ValueError):
    pass


class ProviderError(PlateDiffError, RuntimeError):
    pass


class AllSamplesFailed(PlateDiffError, RuntimeError):
    pass


class ConfigError(PlateDiffError, ValueError):
    pass
