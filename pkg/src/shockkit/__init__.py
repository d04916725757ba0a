"""Causal analysis of user activity around platform events."""

from .errors import DataError, RecordError, ShockkitError
from .store import ActivityRecord, EventStore, IngestStats, ingest

__all__ = ["ActivityRecord", "DataError", "EventStore", "IngestStats", "RecordError", "ShockkitError", "ingest"]
__version__ = "0.1.0"
