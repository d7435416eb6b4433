"""Near-line representation pipeline: ingest, encode, versioned index table."""
from .clock import VirtualClock, WallClock
from .service import IngestError, ItemEvent, Pipeline, Ticket
from .simulate import read_events, simulate, write_events
from .store import IndexTable, NotFound, VersionedRep, freshness_report

__all__ = [
    "IndexTable", "IngestError", "ItemEvent", "NotFound", "Pipeline", "Ticket", "VersionedRep",
    "VirtualClock", "WallClock", "freshness_report", "read_events", "simulate", "write_events",
]
