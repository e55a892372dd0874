"""Exception types shared across the package."""

from __future__ import annotations


class TopoPriorError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(TopoPriorError):
    """An input value violates a documented precondition."""


class ConfigurationError(TopoPriorError):
    """A configuration file or flag combination is unusable."""


class GraphFormatError(ValidationError):
    """Serialized graph bytes cannot be decoded.

    ``offset`` is the byte offset of the first problem when known,
    otherwise None.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(TopoPriorError):
    """A checkpoint file is missing fields or has an unsupported version."""


class NumericalError(TopoPriorError):
    """A numeric quantity became non-finite during training or simulation."""


class EmbeddingServiceError(TopoPriorError):
    """The external embedding endpoint failed.

    ``retriable`` tells callers whether a retry is sensible (timeouts,
    5xx) or pointless (malformed request, bad dimension).
    """

    def __init__(self, message: str, retriable: bool = True):
        super().__init__(message)
        self.retriable = retriable
