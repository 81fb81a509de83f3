"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TrackSyncError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TrackSyncError, ValueError):
    """Input violates a documented precondition."""


class OutOfRangeError(InvalidInputError):
    """A query (time, index) falls outside the valid range."""


class SchemaError(InvalidInputError):
    """A file does not match its documented schema.

    ``location`` names the offending field (e.g. ``tracks[3].positions``).
    """

    def __init__(self, message: str, location: str | None = None, source: str | None = None):
        self.location = location
        self.source = source
        parts = []
        if source:
            parts.append(str(source))
        if location:
            parts.append(location)
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class NumericalError(TrackSyncError, RuntimeError):
    """A numerical routine failed in a way the caller cannot recover from."""
