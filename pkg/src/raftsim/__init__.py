"""Deterministic, testable implementations of the Fast Raft and C-Raft
consensus protocols, a seeded discrete-event network simulator, a
trace-level safety/liveness checker, and scenario presets that reproduce
the reference experiments at desk scale.
"""

from raftsim.core import (
    ApprovalMark,
    Configuration,
    EntryId,
    InsertResult,
    InvalidConfiguration,
    Log,
    LogEntry,
    Payload,
    PayloadKind,
    ProtocolViolation,
    SiteId,
    classic_quorum_size,
    fast_quorum_size,
)

__all__ = [
    "ApprovalMark",
    "Configuration",
    "EntryId",
    "InsertResult",
    "InvalidConfiguration",
    "Log",
    "LogEntry",
    "Payload",
    "PayloadKind",
    "ProtocolViolation",
    "SiteId",
    "classic_quorum_size",
    "fast_quorum_size",
]
