"""Protocol-agnostic building blocks: identifiers, log entries, the sparse
replicated log, configurations, and quorum arithmetic.

Everything in this module is a plain data structure with no I/O and no
internal synchronization; each :class:`Log` is owned by exactly one site
state machine.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

SiteId = str
"""Opaque unique site identifier; ordering (string order) is stable."""


class InvalidConfiguration(ValueError):
    """Raised for quorum arithmetic over an empty configuration."""


class ProtocolViolation(AssertionError):
    """An operation that correct protocol execution must never attempt,
    e.g. overwriting a committed log slot with a different entry."""


@dataclass(frozen=True, slots=True, order=True)
class EntryId:
    """Globally unique identity of a proposal: (proposer, per-proposer counter).

    Equality of EntryId defines "same entry"; two proposals with equal
    payloads but different ids are distinct.  The ordering is used as the
    deterministic tie-break when a leader must pick among equally voted
    entries.
    """

    proposer: SiteId
    sequence: int


class ApprovalMark(enum.Enum):
    """How an entry got into a particular site's log slot.

    SELF: inserted directly from a proposer's broadcast.
    LEADER: inserted or confirmed by the leader.  At a fixed slot the mark
    only ever moves SELF -> LEADER, never back.
    """

    SELF = "self"
    LEADER = "leader"


class PayloadKind(enum.Enum):
    APP_DATA = "app"
    CONFIGURATION = "config"
    GLOBAL_STATE = "global_state"
    BATCH = "batch"
    NULL = "null"


@dataclass(frozen=True, slots=True)
class Payload:
    """Closed set of replicated datum kinds.

    ``members`` is set for CONFIGURATION payloads, ``data`` for APP_DATA;
    BATCH and GLOBAL_STATE payloads carry their structured bodies in
    ``body`` (see :mod:`raftsim.c_raft`).  NULL is committable filler used
    when vote-nulling leaves an index with only null votes.
    """

    kind: PayloadKind
    data: bytes = b""
    members: tuple[SiteId, ...] = ()
    body: object = None

    @staticmethod
    def app(data: bytes) -> "Payload":
        return Payload(PayloadKind.APP_DATA, data=data)

    @staticmethod
    def configuration(members: tuple[SiteId, ...]) -> "Payload":
        return Payload(PayloadKind.CONFIGURATION, members=tuple(sorted(members)))

    @staticmethod
    def null() -> "Payload":
        return Payload(PayloadKind.NULL)


@dataclass(frozen=True, slots=True)
class LogEntry:
    """One replicated log slot: proposal identity, datum, insertion term, mark.

    ``term`` is stamped by the inserting site and never exceeds that site's
    currentTerm at insertion time.  Copies of the same proposal at
    different sites may carry different terms; identity is ``id`` alone.
    """

    id: EntryId
    payload: Payload
    term: int
    inserted_by: ApprovalMark

    def with_mark(self, mark: ApprovalMark, term: int) -> "LogEntry":
        return LogEntry(self.id, self.payload, term, mark)


class InsertResult(enum.Enum):
    INSERTED = "inserted"
    OCCUPIED = "occupied"


class Log:
    """Sparse 1-based map from index to :class:`LogEntry`.

    Gaps are permitted: a self-approved entry may exist at index ``i`` while
    some ``j < i`` is still empty.  Indices at or below the owning site's
    commitIndex must be occupied and leader-approved; that invariant is the
    owner's responsibility (see :meth:`overwrite`).
    """

    __slots__ = ("_slots",)

    def __init__(self) -> None:
        self._slots: dict[int, LogEntry] = {}

    def __contains__(self, index: int) -> bool:
        return index in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def get(self, index: int) -> Optional[LogEntry]:
        return self._slots.get(index)

    def items(self) -> Iterator[tuple[int, LogEntry]]:
        return iter(sorted(self._slots.items()))

    @property
    def last_log_index(self) -> int:
        """Highest occupied index, 0 if the log is empty."""
        return max(self._slots, default=0)

    @property
    def last_leader_index(self) -> int:
        """Highest index holding a leader-approved entry, 0 if none.

        Always <= last_log_index since leader-approved entries occupy slots.
        """
        return max(
            (i for i, e in self._slots.items() if e.inserted_by is ApprovalMark.LEADER),
            default=0,
        )

    def leader_frontier(self) -> int:
        """Largest j such that every index 1..j is occupied leader-approved."""
        j = 0
        while True:
            entry = self._slots.get(j + 1)
            if entry is None or entry.inserted_by is not ApprovalMark.LEADER:
                return j
            j += 1

    def insert_if_empty(self, index: int, entry: LogEntry) -> InsertResult:
        """Store ``entry`` at ``index`` unless the slot is occupied.

        Re-delivery of the same proposal to an occupied slot is a no-op
        (idempotent OCCUPIED), as is a competing proposal: the resident
        entry is never displaced by this path.
        """
        if index < 1:
            raise ValueError(f"log indices are 1-based, got {index}")
        if index in self._slots:
            return InsertResult.OCCUPIED
        self._slots[index] = entry
        return InsertResult.INSERTED

    def overwrite(self, index: int, entry: LogEntry, commit_index: int) -> None:
        """Unconditionally store a leader-approved ``entry`` at ``index``.

        Only the leader's choices travel this path; committed slots are
        immutable, so the caller must pass its current commitIndex and the
        index must lie above it.
        """
        if entry.inserted_by is not ApprovalMark.LEADER:
            raise ProtocolViolation("overwrite requires a leader-approved entry")
        if index <= commit_index:
            raise ProtocolViolation(
                f"overwrite at committed index {index} (commitIndex={commit_index})"
            )
        self._slots[index] = entry

    def entries_in(self, lo: int, hi: int) -> list[tuple[int, LogEntry]]:
        """Occupied (index, entry) pairs with lo <= index <= hi, ascending."""
        return [(i, self._slots[i]) for i in range(lo, hi + 1) if i in self._slots]

    def truncate_from(self, index: int, commit_index: int) -> None:
        """Drop every slot at or above ``index`` (dense-log conflict
        resolution); committed slots are immutable."""
        if index <= commit_index:
            raise ProtocolViolation(
                f"truncation at committed index {index} (commitIndex={commit_index})")
        for i in [i for i in self._slots if i >= index]:
            del self._slots[i]

    def self_approved_above(self, commit_index: int) -> list[tuple[int, LogEntry]]:
        """All self-approved slots strictly above ``commit_index``, ascending."""
        return [
            (i, e)
            for i, e in sorted(self._slots.items())
            if i > commit_index and e.inserted_by is ApprovalMark.SELF
        ]

    def find_entry(self, entry_id: EntryId) -> Optional[int]:
        """Index currently holding ``entry_id``, or None."""
        for i, e in self._slots.items():
            if e.id == entry_id:
                return i
        return None

    def snapshot(self) -> dict[int, LogEntry]:
        """Shallow copy of the slot map (entries are immutable)."""
        return dict(self._slots)

    def restore(self, slots: dict[int, LogEntry]) -> None:
        self._slots = dict(slots)


@dataclass(frozen=True, slots=True)
class Configuration:
    """The voting-member set in force; quorum sizes derive from its size.

    Non-empty, ordered for deterministic fan-out.  Committed configuration
    entries differ from their predecessor by exactly one member.
    """

    members: tuple[SiteId, ...]

    def __post_init__(self) -> None:
        if not self.members:
            raise InvalidConfiguration("configuration must be non-empty")
        object.__setattr__(self, "members", tuple(sorted(dict.fromkeys(self.members))))

    def __contains__(self, site: SiteId) -> bool:
        return site in self.members

    def __len__(self) -> int:
        return len(self.members)

    @property
    def classic_quorum(self) -> int:
        return classic_quorum_size(len(self.members))

    @property
    def fast_quorum(self) -> int:
        return fast_quorum_size(len(self.members))

    def with_member(self, site: SiteId) -> "Configuration":
        return Configuration(self.members + (site,))

    def without_member(self, site: SiteId) -> "Configuration":
        return Configuration(tuple(m for m in self.members if m != site))

    def differs_by_one(self, other: "Configuration") -> bool:
        a, b = set(self.members), set(other.members)
        return len(a.symmetric_difference(b)) == 1


def classic_quorum_size(m: int) -> int:
    """Majority quorum: floor(M/2) + 1.  Any two classic quorums intersect."""
    if m < 1:
        raise InvalidConfiguration(f"configuration size must be >= 1, got {m}")
    return m // 2 + 1


def fast_quorum_size(m: int) -> int:
    """Fast quorum: ceil(3M/4).

    Sized so that its overlap with every classic quorum is a strict
    majority of that classic quorum, which is what lets a leader that
    hears only a classic quorum of votes still identify an entry held by
    a full fast quorum.
    """
    if m < 1:
        raise InvalidConfiguration(f"configuration size must be >= 1, got {m}")
    return -(-3 * m // 4)
