"""Exception hierarchy shared by every flowforge module.

The CLI maps these classes onto process exit codes, so new error types
should subclass one of the existing categories rather than Exception.
"""

from __future__ import annotations

__all__ = [
    "FlowForgeError",
    "InvalidArgumentError",
    "ConfigError",
    "ParseError",
    "TraceMissError",
    "TransportError",
    "RemoteError",
    "NumericFailureError",
]


class FlowForgeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(FlowForgeError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class ConfigError(InvalidArgumentError):
    """A run configuration is malformed or internally inconsistent."""


class ParseError(FlowForgeError):
    """A file (image or trace) could not be decoded.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class TraceMissError(FlowForgeError):
    """A replayed velocity request has no matching trace record."""


class TransportError(FlowForgeError):
    """A remote backend request failed at the socket level.

    ``attempts`` counts how many times the request was tried before
    giving up.
    """

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class RemoteError(FlowForgeError):
    """A protocol server answered with an error status."""


class NumericFailureError(FlowForgeError):
    """A loss or gradient evaluation produced a non-finite value.

    ``term`` names the offending quantity (``l_obj``, ``l_div``,
    ``l_bg`` or ``gradient``).
    """

    def __init__(self, message: str, term: str = ""):
        super().__init__(message)
        self.term = term
