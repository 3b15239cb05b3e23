"""Exception types shared across the package."""

from __future__ import annotations


class TraceLensError(Exception):
    """Base class for all package errors."""


class RejectedInputError(TraceLensError, ValueError):
    """An argument violates a documented precondition."""


class EmptyEvaluationError(TraceLensError):
    """A metric was requested but no instance contributed a term."""


class ValidationFailedError(TraceLensError):
    """A trace violated its invariants where a valid one was required."""


class TraceParseError(TraceLensError):
    """A trace or manifest file could not be parsed."""


class UnsupportedVersionError(TraceParseError):
    """File declares a format version this reader does not know."""


class MalformedPayloadError(TraceParseError):
    """File structure or payload length disagrees with its header."""
