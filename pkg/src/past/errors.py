"""Exception hierarchy shared by every stage of the pipeline."""


class PastError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 2


class ValidationError(PastError, ValueError):
    """Input violates a documented precondition or type invariant."""

    exit_code = 1


class HeaderError(ValidationError):
    """Native volume header is malformed or inconsistent."""


class PayloadMismatchError(ValidationError):
    """Raw payload byte count does not match the header's shape and dtype."""


class IngestionError(ValidationError):
    """External (NIfTI) file cannot be ingested."""


class RoutingError(PastError, LookupError):
    """No model is registered for a volume's protocol."""

    exit_code = 1


class DivergenceError(PastError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MissingArtifactError(PastError):
    """A stage was started before its upstream producer ran."""

    exit_code = 1

    def __init__(self, message, producer):
        super().__init__(message)
        self.producer = producer


class CheckFailure(PastError):
    """A numerical or acceptance check did not pass."""

    exit_code = 3
