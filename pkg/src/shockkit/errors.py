"""Exception types shared across shockkit."""

from __future__ import annotations


class ShockkitError(Exception):
    """Base class for all toolkit errors."""


class DataError(ShockkitError):
    """Input data cannot support the requested analysis.

    The CLI maps this to exit status 3.
    """


class RecordError(ShockkitError):
    """A single NDJSON line could not be turned into an ActivityRecord."""
