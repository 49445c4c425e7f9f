"""The closed set of protocol messages.

Every message carries ``level``: "local" for intra-cluster (and flat
single-cluster) consensus, "global" for the inter-cluster level.  Sites
dispatch on (level, type).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from raftsim.core import EntryId, LogEntry, SiteId

LOCAL = "local"
GLOBAL = "global"


@dataclass(frozen=True, slots=True)
class Message:
    level: str = field(default=LOCAL, kw_only=True)

    def describe(self) -> str:
        return type(self).__name__


@dataclass(frozen=True, slots=True)
class Propose(Message):
    """Proposer broadcast: insert ``entry`` at ``index`` and vote."""

    entry: LogEntry
    index: int


@dataclass(frozen=True, slots=True)
class Vote(Message):
    """Follower -> leader: the entry occupying ``index`` after a Propose,
    plus the voter's commitIndex (drives nextIndex bookkeeping)."""

    voter: SiteId
    index: int
    entry: LogEntry
    voter_commit_index: int


@dataclass(frozen=True, slots=True)
class AppendEntries(Message):
    """Leader replication + heartbeat.  ``entries`` is a contiguous run of
    leader-approved entries, empty for a pure heartbeat.  ``global_commit``
    piggybacks the sender's inter-cluster commitIndex to cluster followers
    (two-level protocol only; -1 when absent)."""

    term: int
    leader_id: SiteId
    entries: tuple[tuple[int, LogEntry], ...]
    leader_commit: int
    global_commit: int = -1
    # dense-log consistency point, used by the classic baseline only
    prev_log_index: int = 0
    prev_log_term: int = 0


@dataclass(frozen=True, slots=True)
class AppendEntriesResponse(Message):
    sender: SiteId
    term: int
    success: bool
    ack_index: int


@dataclass(frozen=True, slots=True)
class RequestVote(Message):
    """Candidate solicitation.  The last-log fields describe the candidate's
    last leader-approved entry; self-approved entries never count toward
    up-to-date comparisons."""

    term: int
    candidate_id: SiteId
    cand_last_log_index: int
    cand_last_log_term: int


@dataclass(frozen=True, slots=True)
class RequestVoteResponse(Message):
    sender: SiteId
    term: int
    vote_granted: bool
    self_approved_entries: tuple[tuple[int, LogEntry], ...] = ()


@dataclass(frozen=True, slots=True)
class CommitNotify(Message):
    entry_id: EntryId
    index: int


@dataclass(frozen=True, slots=True)
class JoinRequest(Message):
    joiner: SiteId


@dataclass(frozen=True, slots=True)
class LeaveRequest(Message):
    leaver: SiteId


@dataclass(frozen=True, slots=True)
class JoinAccepted(Message):
    joiner: SiteId
    members: tuple[SiteId, ...]
