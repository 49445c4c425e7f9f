"""The Fast Raft site state machine.

One deterministic event handler per site: proposal handling, the fast and
classic commit tracks, heartbeats, elections with self-approved-entry
recovery, and dynamic membership (see :mod:`raftsim.membership`).  All
effects are state mutation, outbound messages, timer operations, and trace
events; handlers never block.

Protocol shape
--------------
Proposers broadcast an entry for a target index to every configuration
member.  Each member inserts it self-approved (never displacing a resident
entry) and forwards its vote to the leader.  The leader tallies votes per
index and, once a classic quorum has reported at the next uncommitted
index, inserts the entry with the most votes.  If a fast quorum voted for
that entry it commits immediately (two message hops from the proposer);
otherwise the entry replicates through AppendEntries and commits on a
classic quorum of acks.  Elections compare only leader-approved entries;
voters attach their uncommitted self-approved entries to granted votes so
the new leader can re-tally and preserve any entry a fast quorum may
already hold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from raftsim.core import (
    ApprovalMark,
    Configuration,
    EntryId,
    InsertResult,
    LogEntry,
    Payload,
    PayloadKind,
    ProtocolViolation,
    SiteId,
    Log,
)
from raftsim.membership import JoinManager, JoinPhase
from raftsim.messages import (
    AppendEntries,
    AppendEntriesResponse,
    CommitNotify,
    JoinAccepted,
    JoinRequest,
    LeaveRequest,
    Message,
    Propose,
    RequestVote,
    RequestVoteResponse,
    Vote,
)
from raftsim.simnet import Runtime
from raftsim.trace import TraceKind


class Role(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


@dataclass(frozen=True, slots=True)
class ProtocolTimers:
    """Timer settings for one consensus level; all in simulated ms."""

    heartbeat_ms: float = 100.0
    election_ms: tuple[float, float] = (300.0, 600.0)
    proposal_timeout_ms: float = 1000.0
    join_timeout_ms: float = 500.0
    member_timeout_rounds: int = 5
    catchup_chunk: int = 64


def entry_ref(entry: LogEntry) -> str:
    return f"{entry.id.proposer}#{entry.id.sequence}"


class VoteTally:
    """Vote bookkeeping for one log index at the leader.

    Tracks, per candidate entry, the set of voters currently backing it;
    a voter appears in at most one bucket (a re-vote moves it).  Nulled
    votes and recovery back-fill still count as "reported" so the
    classic-quorum gate can open without electing anything.
    """

    __slots__ = ("buckets", "null_reporters", "extra_reporters")

    def __init__(self) -> None:
        self.buckets: dict[EntryId, tuple[LogEntry, set[SiteId]]] = {}
        self.null_reporters: set[SiteId] = set()
        self.extra_reporters: set[SiteId] = set()

    def _forget(self, voter: SiteId) -> None:
        for entry_id in [eid for eid, (_, vs) in self.buckets.items() if voter in vs]:
            self.buckets[entry_id][1].discard(voter)
            if not self.buckets[entry_id][1]:
                del self.buckets[entry_id]
        self.null_reporters.discard(voter)

    def record(self, voter: SiteId, entry: LogEntry) -> None:
        self._forget(voter)
        if entry.id in self.buckets:
            self.buckets[entry.id][1].add(voter)
        else:
            self.buckets[entry.id] = (entry, {voter})

    def record_null(self, voter: SiteId) -> None:
        self._forget(voter)
        self.null_reporters.add(voter)

    def nullify(self, entry_id: EntryId) -> None:
        """Convert all votes for ``entry_id`` into null votes."""
        bucket = self.buckets.pop(entry_id, None)
        if bucket:
            self.null_reporters.update(bucket[1])

    def reporters(self) -> set[SiteId]:
        out = set(self.null_reporters) | self.extra_reporters
        for _, voters in self.buckets.values():
            out |= voters
        return out

    def voters_for(self, entry_id: EntryId) -> set[SiteId]:
        bucket = self.buckets.get(entry_id)
        return set(bucket[1]) if bucket else set()

    def best(self) -> Optional[tuple[LogEntry, set[SiteId]]]:
        """Non-null entry with the most votes; ties broken by smallest id."""
        if not self.buckets:
            return None
        ranked = sorted(self.buckets.items(), key=lambda kv: (-len(kv[1][1]), kv[0]))
        entry, voters = ranked[0][1]
        return entry, set(voters)


class FastRaftSite:
    """A single Fast Raft participant, driven entirely by the simulator.

    ``level`` distinguishes intra-cluster ("local") state from the
    inter-cluster ("global") instance layered on top by C-Raft; persistent
    fields are namespaced accordingly in stable storage.
    """

    def __init__(
        self,
        rt: Runtime,
        configuration: Configuration,
        timers: ProtocolTimers,
        level: str = "local",
        instance: str = "c0",
        initial_leader: Optional[SiteId] = None,
        member: bool = True,
    ):
        self.rt = rt
        self.site_id = rt.site_id
        self.level = level
        self.instance = instance
        self.timers = timers

        # persistent
        self.current_term = 0
        self.voted_for: Optional[SiteId] = None
        self.log = Log()
        self.configuration = configuration

        # volatile
        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.leader_id: Optional[SiteId] = None
        self.passive = not member
        self.global_commit_seen = -1
        self._acked_marker: tuple[int, Optional[SiteId]] = (-1, None)
        self._acked_prefix = 0
        self._committed_ids: dict[EntryId, int] = {}
        self._entry_seq = 0

        # leader-only volatile
        self.next_index: dict[SiteId, int] = {}
        self.match_index: dict[SiteId, int] = {}
        self.fast_match_index: dict[SiteId, int] = {}
        self.possible: dict[int, VoteTally] = {}
        self._chosen_at: dict[EntryId, int] = {}
        self._missed_rounds: dict[SiteId, int] = {}
        self.joins = JoinManager(self)

        # candidate-only volatile
        self._votes_granted: set[SiteId] = set()
        self._recovery_stash: dict[SiteId, tuple[tuple[int, LogEntry], ...]] = {}

        # proposer-side bookkeeping
        self.outstanding: dict[EntryId, Payload] = {}
        self._propose_started: set[EntryId] = set()

        # hooks (used by the two-level composition and workloads)
        self.on_committed: list[Callable[[int, LogEntry], None]] = []
        self.on_notified: list[Callable[[EntryId, int], None]] = []
        self.on_became_leader: list[Callable[[], None]] = []
        self.on_lost_leadership: list[Callable[[], None]] = []
        self.on_leader_learned: list[Callable[[SiteId], None]] = []

        if initial_leader is not None and not self.passive:
            self.current_term = 1
            self.leader_id = initial_leader
            self.voted_for = initial_leader
            if initial_leader == self.site_id:
                self.role = Role.LEADER
                self._init_leader_maps()
        self._persist_all()

    # -- persistence -------------------------------------------------------

    def _persist(self, name: str, value: object) -> None:
        self.rt.store.put(self.level, name, value)

    def _persist_all(self) -> None:
        self._persist("current_term", self.current_term)
        self._persist("voted_for", self.voted_for)
        self._persist("configuration", self.configuration)
        for i, e in self.log.items():
            self.rt.store.log_put(self.level, "log", i, e)

    def _store_entry(self, index: int, entry: LogEntry) -> None:
        self.rt.store.log_put(self.level, "log", index, entry)

    def on_recover(self) -> None:
        """Reload persistent fields; all volatile state resets and the
        committed prefix is relearned from the current leader."""
        store = self.rt.store
        self.current_term = store.get(self.level, "current_term", 0)
        self.voted_for = store.get(self.level, "voted_for")
        self.configuration = store.get(self.level, "configuration", self.configuration)
        self._entry_seq = store.get(self.level, "entry_seq", 0)
        self.log.restore(store.log_snapshot(self.level, "log"))
        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.leader_id = None
        self.passive = self.site_id not in self.configuration
        self._acked_marker = (-1, None)
        self._acked_prefix = 0
        self._committed_ids = {}
        self.possible = {}
        self._chosen_at = {}
        self.outstanding = {}
        self._votes_granted = set()
        self._recovery_stash = {}
        if not self.passive:
            self._arm_election_timer()

    # -- lifecycle -----------------------------------------------------------

    def on_start(self) -> None:
        if self.passive:
            return
        if self.role is Role.LEADER:
            self._arm_heartbeat()
        else:
            self._arm_election_timer()

    def _arm_election_timer(self) -> None:
        lo, hi = self.timers.election_ms
        self.rt.set_timer((self.level, "election"), self.rt.rng.uniform(lo, hi))

    def _arm_heartbeat(self) -> None:
        self.rt.set_timer((self.level, "heartbeat"), self.timers.heartbeat_ms)

    def next_entry_id(self) -> EntryId:
        # persisted so a recovered proposer never reuses a sequence number
        self._entry_seq += 1
        self._persist("entry_seq", self._entry_seq)
        return EntryId(self.site_id, self._entry_seq)

    # -- message dispatch ----------------------------------------------------

    def on_message(self, sender: SiteId, msg: Message) -> None:
        if self.passive and not isinstance(msg, (AppendEntries, JoinAccepted)):
            # non-voting: a joiner still receives the catch-up stream and its
            # acceptance; everything else waits until membership
            return
        if isinstance(msg, Propose):
            self.on_propose(sender, msg)
        elif isinstance(msg, Vote):
            self.on_vote(sender, msg)
        elif isinstance(msg, AppendEntries):
            self.on_append_entries(sender, msg)
        elif isinstance(msg, AppendEntriesResponse):
            self.on_append_entries_response(sender, msg)
        elif isinstance(msg, RequestVote):
            self.on_request_vote(sender, msg)
        elif isinstance(msg, RequestVoteResponse):
            self.on_request_vote_response(sender, msg)
        elif isinstance(msg, CommitNotify):
            self._on_commit_notified(msg.entry_id, msg.index)
        elif isinstance(msg, (JoinRequest, LeaveRequest, JoinAccepted)):
            self.joins.on_message(sender, msg)
        else:  # pragma: no cover
            raise TypeError(f"unhandled message {msg!r}")

    def on_timer(self, key: tuple) -> None:
        kind = key[1]
        if kind == "election":
            if not self.passive and self.role is not Role.LEADER:
                self.on_election_timeout()
        elif kind == "heartbeat":
            if self.role is Role.LEADER:
                self.leader_heartbeat()
        elif kind == "proposal":
            self._retry_proposal(key[2])
        elif kind == "join_retry":
            self.joins.retry_join()
        else:  # pragma: no cover
            raise ValueError(f"unhandled timer {key!r}")

    # -- proposing -----------------------------------------------------------

    def propose(self, payload: Payload, entry_id: Optional[EntryId] = None) -> EntryId:
        """Broadcast a new proposal to every configuration member (including
        this site) at the next free index of our own log; arm the proposal
        timer so an uncommitted entry is re-sent."""
        eid = entry_id or self.next_entry_id()
        self.outstanding[eid] = payload
        if eid not in self._propose_started:
            self._propose_started.add(eid)
            self.rt.trace(TraceKind.PROPOSE_START,
                          level=self.level, instance=self.instance,
                          entry=f"{eid.proposer}#{eid.sequence}",
                          payload=payload.kind.value)
        self._broadcast_proposal(eid, payload, self.log.last_log_index + 1)
        return eid

    def _broadcast_proposal(self, eid: EntryId, payload: Payload, index: int) -> None:
        entry = LogEntry(eid, payload, self.current_term, ApprovalMark.SELF)
        for member in self.configuration.members:
            self.rt.send(member, Propose(entry, index, level=self.level))
        self.rt.set_timer((self.level, "proposal", eid), self.timers.proposal_timeout_ms)

    def _retry_proposal(self, eid: EntryId) -> None:
        payload = self.outstanding.get(eid)
        if payload is None:
            return
        if eid in self._committed_ids:
            self._on_commit_notified(eid, self._committed_ids[eid])
            return
        # resend at the index our own copy occupies, else at a fresh index
        index = self.log.find_entry(eid)
        if index is None or index <= self.commit_index:
            index = self.log.last_log_index + 1
        self._broadcast_proposal(eid, payload, index)

    # -- follower: proposals ---------------------------------------------------

    def on_propose(self, sender: SiteId, msg: Propose) -> None:
        committed_at = self._committed_ids.get(msg.entry.id)
        if committed_at is not None:
            self._notify_proposer(msg.entry.id, committed_at)
            return
        stamped = LogEntry(msg.entry.id, msg.entry.payload, self.current_term,
                           ApprovalMark.SELF)
        if self.log.insert_if_empty(msg.index, stamped) is InsertResult.INSERTED:
            self._store_entry(msg.index, stamped)
            self.rt.trace(TraceKind.INSERT,
                          level=self.level, instance=self.instance, index=msg.index,
                          entry=entry_ref(stamped), mark="self", term=stamped.term)
        if self.leader_id is None:
            return
        resident = self.log.get(msg.index)
        self._gate_vote(msg.index, resident,
                        lambda: self._send_vote(msg.index))

    def _send_vote(self, index: int) -> None:
        if self.leader_id is None:
            return
        resident = self.log.get(index)
        if resident is None or index <= self.commit_index:
            return
        self.rt.send(self.leader_id,
                     Vote(self.site_id, index, resident, self.commit_index,
                          level=self.level))

    def _gate_vote(self, index: int, entry: LogEntry, send: Callable[[], None]) -> None:
        """Hook point: the inter-cluster level anchors state locally before
        letting the vote out.  The base protocol votes immediately."""
        send()

    def _notify_proposer(self, eid: EntryId, index: int) -> None:
        if eid.proposer == self.site_id:
            self._on_commit_notified(eid, index)
        else:
            self.rt.send(eid.proposer, CommitNotify(eid, index, level=self.level))

    def _on_commit_notified(self, eid: EntryId, index: int) -> None:
        if eid in self.outstanding:
            del self.outstanding[eid]
            self.rt.cancel_timer((self.level, "proposal", eid))
            self.rt.trace(TraceKind.COMMIT_NOTIFIED,
                          level=self.level, instance=self.instance,
                          entry=f"{eid.proposer}#{eid.sequence}", index=index)
            for hook in self.on_notified:
                hook(eid, index)

    # -- leader: votes and decisions ------------------------------------------

    def on_vote(self, sender: SiteId, msg: Vote) -> None:
        if self.role is not Role.LEADER:
            return
        if msg.voter not in self.configuration:
            return  # non-members and non-voting joiners never count
        if msg.index <= self.commit_index:
            return  # stale: the decision at this index is immutable
        self.next_index[msg.voter] = msg.voter_commit_index + 1
        tally = self.possible.setdefault(msg.index, VoteTally())
        self._record_vote(tally, msg.index, msg.voter, msg.entry)
        self.leader_decide()

    def _record_vote(self, tally: VoteTally, index: int, voter: SiteId,
                     entry: LogEntry) -> None:
        committed_at = self._committed_ids.get(entry.id)
        chosen_at = self._chosen_at.get(entry.id)
        duplicate = (committed_at is not None and committed_at != index) or \
                    (chosen_at is not None and chosen_at != index)
        if duplicate:
            tally.record_null(voter)  # already decided elsewhere
        else:
            tally.record(voter, entry)

    def leader_decide(self) -> None:
        """Advance decisions at k = commitIndex + 1 while possible; ship any
        fresh insertions to followers immediately afterwards."""
        shipped_something = False
        while True:
            advanced, inserted = self._decide_step()
            shipped_something = shipped_something or inserted
            if not advanced:
                break
        if shipped_something:
            self._ship_entries()

    def _decide_step(self) -> tuple[bool, bool]:
        """One decision attempt at the next uncommitted index.

        Returns (commit advanced, fresh insertion made)."""
        k = self.commit_index + 1
        if self._decide_blocked(k):
            return False, False
        resident = self.log.get(k)
        tally = self.possible.get(k)
        if resident is not None and resident.inserted_by is ApprovalMark.LEADER:
            if tally is not None:
                for voter in tally.voters_for(resident.id):
                    if self.fast_match_index.get(voter, 0) < k:
                        self.fast_match_index[voter] = k
            return self._try_fast_commit(k, resident), False

        if tally is None:
            return False, False
        quorum = self.configuration.classic_quorum
        if len(tally.reporters() & set(self.configuration.members)) < quorum:
            return False, False
        best = self._pick_candidate(tally)
        if best is None:
            # vote-nulling residue: a quorum reported but every vote was
            # nulled; fill with a committable no-op so k can advance
            entry = LogEntry(self.next_entry_id(), Payload.null(),
                             self.current_term, ApprovalMark.LEADER)
            voters: set[SiteId] = set()
        else:
            picked, voters = best
            entry = picked.with_mark(ApprovalMark.LEADER, self.current_term)
        self._leader_insert(k, entry)
        for voter in voters:
            if self.fast_match_index.get(voter, 0) < k:
                self.fast_match_index[voter] = k
        if not self._after_decide_insertion(k, entry):
            return False, True
        return self._try_fast_commit(k, entry), True

    def _pick_candidate(self, tally: VoteTally) -> Optional[tuple[LogEntry, set[SiteId]]]:
        """Hook point: which tallied entry wins at an index.  The base rule
        is most votes with smallest-id tie-break; the inter-cluster level
        gives leader-approved candidates absolute precedence."""
        return tally.best()

    def _decide_blocked(self, k: int) -> bool:
        """Hook point: the inter-cluster level blocks the decision loop while
        its own insertion at k is still being anchored locally."""
        return False

    def _after_decide_insertion(self, k: int, entry: LogEntry) -> bool:
        """Hook point: return False to suspend the decide loop until an
        external continuation resumes it (inter-cluster anchoring)."""
        return True

    def _leader_insert(self, k: int, entry: LogEntry) -> None:
        prior = self.log.get(k)
        self.log.overwrite(k, entry, self.commit_index)
        self._store_entry(k, entry)
        self._chosen_at[entry.id] = k
        kind = TraceKind.OVERWRITE if prior is not None else TraceKind.INSERT
        self.rt.trace(kind, level=self.level, instance=self.instance, index=k,
                      entry=entry_ref(entry), mark="leader", term=entry.term)
        # null this entry wherever else it appears so no index elects it twice
        for index, tally in self.possible.items():
            if index != k:
                tally.nullify(entry.id)
        self.match_index[self.site_id] = self.log.leader_frontier()
        if entry.payload.kind is PayloadKind.CONFIGURATION:
            self._adopt_configuration(k, entry)

    def _try_fast_commit(self, k: int, entry: LogEntry) -> bool:
        backers = sum(1 for m in self.configuration.members
                      if self.fast_match_index.get(m, 0) >= k)
        if backers >= self.configuration.fast_quorum and entry.term == self.current_term:
            self._commit_advance(k, "fast")
            return True
        return False

    def _commit_advance(self, to_index: int, cause: str) -> None:
        """Commit every index up to ``to_index`` (leader paths may leapfrog
        over older-term entries once a current-term entry reaches quorum)."""
        while self.commit_index < to_index:
            i = self.commit_index + 1
            entry = self.log.get(i)
            if entry is None or entry.inserted_by is not ApprovalMark.LEADER:
                raise ProtocolViolation(
                    f"{self.site_id} committing {i} without a leader-approved entry")
            self.commit_index = i
            self._committed_ids[entry.id] = i
            self.rt.trace(TraceKind.COMMIT,
                          level=self.level, instance=self.instance, index=i,
                          entry=entry_ref(entry), term=entry.term, cause=cause,
                          payload=entry.payload.kind.value)
            if entry.payload.kind is PayloadKind.CONFIGURATION:
                self.rt.trace(TraceKind.CONFIG_CHANGE,
                              level=self.level, instance=self.instance,
                              phase="committed", index=i,
                              members=list(entry.payload.members))
                if self.role is Role.LEADER:
                    self.joins.on_config_committed(i, entry)
            if cause != "learned":
                self._notify_proposer(entry.id, i)
            for hook in self.on_committed:
                hook(i, entry)

    # -- leader: replication ----------------------------------------------------

    def leader_heartbeat(self) -> None:
        """Periodic round: replicate pending leader-approved entries (or an
        empty keepalive) to every member, advance per-follower miss counters,
        and drive the catch-up stream of an active joiner."""
        for member in self.configuration.members:
            if member == self.site_id:
                continue
            self._missed_rounds[member] = self._missed_rounds.get(member, 0) + 1
            self._send_append(member)
        self.joins.on_heartbeat_round()
        for member in list(self._missed_rounds):
            if member not in self.configuration.members:
                del self._missed_rounds[member]
                continue
            if self._missed_rounds[member] >= self.timers.member_timeout_rounds:
                self.joins.request_silent_leave(member)
        self._arm_heartbeat()

    def _send_append(self, member: SiteId) -> None:
        nxt = self.next_index.get(member, self.commit_index + 1)
        last = self.log.last_leader_index
        entries: tuple[tuple[int, LogEntry], ...] = ()
        if last >= nxt:
            span = self.log.entries_in(nxt, last)
            if len(span) != last - nxt + 1:
                raise ProtocolViolation("gap inside the leader-approved prefix")
            entries = tuple(span)
        self.rt.send(member, AppendEntries(
            self.current_term, self.site_id, entries, self.commit_index,
            global_commit=self._piggyback_global_commit(), level=self.level))

    def _piggyback_global_commit(self) -> int:
        return -1  # two-level composition overrides

    def _ship_entries(self) -> None:
        """Push fresh decisions without waiting for the heartbeat tick; the
        member-timeout round counters only advance on periodic rounds."""
        if self.role is not Role.LEADER:
            return
        for member in self.configuration.members:
            if member == self.site_id:
                continue
            if self.log.last_leader_index >= self.next_index.get(member, 1):
                self._send_append(member)

    # -- append entries (follower side) -----------------------------------------

    def on_append_entries(self, sender: SiteId, msg: AppendEntries) -> None:
        if msg.term < self.current_term:
            self.rt.send(sender, AppendEntriesResponse(
                self.site_id, self.current_term, False, self._acked_prefix,
                level=self.level))
            return
        self._adopt_term(msg.term)
        if self.role is not Role.FOLLOWER:
            self._become_follower("append_entries")
        if self.leader_id != msg.leader_id:
            self.leader_id = msg.leader_id
            for hook in self.on_leader_learned:
                hook(msg.leader_id)
        if self._acked_marker != (msg.term, msg.leader_id):
            # a new leader's log is only trusted up to our committed prefix
            self._acked_marker = (msg.term, msg.leader_id)
            self._acked_prefix = self.commit_index
        if not self.passive:
            self._arm_election_timer()
        if msg.global_commit >= 0:
            self.global_commit_seen = max(self.global_commit_seen, msg.global_commit)

        accepted, new_pairs, span = self._apply_entries(msg)
        if not accepted:
            self.rt.send(sender, AppendEntriesResponse(
                self.site_id, self.current_term, False, self._acked_prefix,
                level=self.level))
            return
        self._finalize_append(sender, msg, new_pairs, span)

    def _apply_entries(
        self, msg: AppendEntries
    ) -> tuple[bool, list[tuple[int, LogEntry]], Optional[tuple[int, int]]]:
        """Overwrite the leader's choices into the log.

        Entries must be internally contiguous and must not open a gap above
        our leader-approved frontier; committed slots are immutable and only
        ever re-shipped with the identical entry."""
        if not msg.entries:
            return True, [], None
        first = msg.entries[0][0]
        last = msg.entries[-1][0]
        if [i for i, _ in msg.entries] != list(range(first, last + 1)):
            return False, [], None
        if first > self.log.leader_frontier() + 1:
            return False, [], None
        new_pairs: list[tuple[int, LogEntry]] = []
        for i, entry in msg.entries:
            if i <= self.commit_index:
                resident = self.log.get(i)
                if resident is None or resident.id != entry.id:
                    raise ProtocolViolation(
                        f"{self.site_id} asked to overwrite committed index {i}")
                continue
            prior = self.log.get(i)
            if prior is not None and prior.id == entry.id and \
                    prior.inserted_by is ApprovalMark.LEADER and prior.term == entry.term:
                continue  # idempotent re-ship
            self.log.overwrite(i, entry, self.commit_index)
            self._store_entry(i, entry)
            kind = TraceKind.OVERWRITE if prior is not None else TraceKind.INSERT
            self.rt.trace(kind, level=self.level, instance=self.instance, index=i,
                          entry=entry_ref(entry), mark="leader", term=entry.term)
            new_pairs.append((i, entry))
            if entry.payload.kind is PayloadKind.CONFIGURATION:
                self._adopt_configuration(i, entry)
        return True, new_pairs, (first, last)

    def _finalize_append(self, sender: SiteId, msg: AppendEntries,
                         new_pairs: list[tuple[int, LogEntry]],
                         span: Optional[tuple[int, int]]) -> None:
        if span is not None and span[0] <= self._acked_prefix + 1:
            self._acked_prefix = max(self._acked_prefix, span[1])
        new_commit = min(msg.leader_commit, self._acked_prefix)
        if new_commit > self.commit_index:
            self._commit_advance(new_commit, "learned")
        self.rt.send(sender, AppendEntriesResponse(
            self.site_id, self.current_term, True, self._acked_prefix,
            level=self.level))

    def _adopt_configuration(self, index: int, entry: LogEntry) -> None:
        """Configurations take effect when inserted, not when committed."""
        members = entry.payload.members
        self.configuration = Configuration(members)
        self._persist("configuration", self.configuration)
        self.rt.trace(TraceKind.CONFIG_CHANGE,
                      level=self.level, instance=self.instance, phase="inserted",
                      index=index, members=list(members))
        if self.role is Role.LEADER:
            for m in members:
                self.next_index.setdefault(m, self.commit_index + 1)
                self.match_index.setdefault(m, 0)
                self.fast_match_index.setdefault(m, 0)
        if self.site_id in members:
            if self.passive:
                # a joiner becomes a voting member with the configuration that
                # includes it
                self.passive = False
                self.rt.cancel_timer((self.level, "join_retry"))
                if self.role is not Role.LEADER:
                    self._arm_election_timer()
        elif self.role is Role.LEADER:
            # a leader removing itself keeps driving replication until the
            # entry commits, then steps down (see on_config_committed)
            pass
        else:
            self._go_passive()

    def _go_passive(self) -> None:
        """Removed from the configuration: stop participating entirely; a
        later return goes through the join protocol."""
        if self.role is not Role.FOLLOWER:
            self._become_follower("removed")
        self.passive = True
        self.rt.cancel_timer((self.level, "election"))
        self.rt.cancel_timer((self.level, "heartbeat"))

    # -- append entries (leader side) ---------------------------------------------

    def on_append_entries_response(self, sender: SiteId, msg: AppendEntriesResponse) -> None:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            if self.role is not Role.FOLLOWER:
                self._become_follower("higher_term_response")
            return
        if self.role is not Role.LEADER:
            return
        if self.joins.on_catchup_ack(sender, msg):
            return
        if sender not in self.configuration:
            return
        self._missed_rounds[sender] = 0
        if msg.success:
            self.next_index[sender] = msg.ack_index + 1
            if msg.ack_index > self.match_index.get(sender, 0):
                self.match_index[sender] = msg.ack_index
            self._maybe_classic_commit()
        else:
            self.next_index[sender] = msg.ack_index + 1

    def _maybe_classic_commit(self) -> None:
        self.match_index[self.site_id] = self.log.leader_frontier()
        members = self.configuration.members
        quorum = self.configuration.classic_quorum
        for k in range(self.log.last_leader_index, self.commit_index, -1):
            entry = self.log.get(k)
            if entry is None or entry.term != self.current_term:
                continue
            count = sum(1 for m in members if self.match_index.get(m, 0) >= k)
            if count >= quorum:
                self._commit_advance(k, "classic")
                self.leader_decide()
                return

    # -- elections -------------------------------------------------------------

    def on_election_timeout(self) -> None:
        self.role = Role.CANDIDATE
        self.current_term += 1
        self._persist("current_term", self.current_term)
        self.voted_for = self.site_id
        self._persist("voted_for", self.voted_for)
        self.leader_id = None
        self._votes_granted = {self.site_id}
        self._recovery_stash = {}
        self.rt.trace(TraceKind.ROLE_CHANGE, level=self.level, instance=self.instance,
                      role="candidate", term=self.current_term)
        last_li = self.log.last_leader_index
        last_entry = self.log.get(last_li)
        last_lt = last_entry.term if last_entry is not None else 0
        for member in self.configuration.members:
            if member != self.site_id:
                self.rt.send(member, RequestVote(
                    self.current_term, self.site_id, last_li, last_lt,
                    level=self.level))
        self._arm_election_timer()
        if len(self._votes_granted) >= self.configuration.classic_quorum:
            self._become_leader()  # single-site configuration

    def on_request_vote(self, sender: SiteId, msg: RequestVote) -> None:
        if msg.candidate_id not in self.configuration:
            return  # candidacies from non-members are ignored
        if msg.term < self.current_term:
            self.rt.send(sender, RequestVoteResponse(
                self.site_id, self.current_term, False, level=self.level))
            return
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            if self.role is not Role.FOLLOWER:
                self._become_follower("higher_term_vote")
        my_last_li = self.log.last_leader_index
        my_last = self.log.get(my_last_li)
        my_last_lt = my_last.term if my_last is not None else 0
        up_to_date = (msg.cand_last_log_term > my_last_lt) or (
            msg.cand_last_log_term == my_last_lt
            and msg.cand_last_log_index >= my_last_li)
        granted = self.voted_for in (None, msg.candidate_id) and up_to_date
        self_approved: tuple[tuple[int, LogEntry], ...] = ()
        if granted:
            self.voted_for = msg.candidate_id
            self._persist("voted_for", self.voted_for)
            self_approved = tuple(self.log.self_approved_above(self.commit_index))
            self._arm_election_timer()
        self.rt.send(sender, RequestVoteResponse(
            self.site_id, self.current_term, granted, self_approved,
            level=self.level))

    def on_request_vote_response(self, sender: SiteId, msg: RequestVoteResponse) -> None:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            if self.role is not Role.FOLLOWER:
                self._become_follower("higher_term_grant")
            return
        if self.role is not Role.CANDIDATE or msg.term != self.current_term:
            return
        if not msg.vote_granted or sender not in self.configuration:
            return
        self._votes_granted.add(sender)
        self._recovery_stash[sender] = msg.self_approved_entries
        if len(self._votes_granted) >= self.configuration.classic_quorum:
            self._become_leader()

    def _init_leader_maps(self) -> None:
        start = self.commit_index + 1
        self.next_index = {m: start for m in self.configuration.members}
        self.match_index = {m: 0 for m in self.configuration.members}
        self.fast_match_index = {m: 0 for m in self.configuration.members}
        self.match_index[self.site_id] = self.log.leader_frontier()
        self._missed_rounds = {}
        self.possible = {}
        self._chosen_at = {e.id: i for i, e in self.log.items()
                           if e.inserted_by is ApprovalMark.LEADER and i > self.commit_index}

    def _become_leader(self) -> None:
        self.role = Role.LEADER
        self.leader_id = self.site_id
        self.rt.trace(TraceKind.ROLE_CHANGE, level=self.level, instance=self.instance,
                      role="leader", term=self.current_term)
        self.rt.cancel_timer((self.level, "election"))
        self._init_leader_maps()
        self._run_recovery()
        self.leader_decide()
        for member in self.configuration.members:
            if member != self.site_id:
                self._send_append(member)
        self._arm_heartbeat()
        for hook in self.on_became_leader:
            hook()

    def _run_recovery(self) -> None:
        """Re-tally every self-approved entry reported by our electors (and
        our own) so any entry a fast quorum may already hold is re-chosen at
        its index before new decisions are made."""
        max_index = 0
        contributions = dict(self._recovery_stash)
        contributions[self.site_id] = tuple(self.log.self_approved_above(self.commit_index))
        for voter, entries in sorted(contributions.items()):
            for index, entry in entries:
                if index <= self.commit_index:
                    continue
                tally = self.possible.setdefault(index, VoteTally())
                self._record_vote(tally, index, voter, entry)
                max_index = max(max_index, index)
        granters = set(self._votes_granted)
        for k in range(self.commit_index + 1, max_index + 1):
            tally = self.possible.setdefault(k, VoteTally())
            # every elector reported its complete self-approved list, so all
            # of them count as having reported at every recovered index
            tally.extra_reporters |= granters

    def _become_follower(self, reason: str) -> None:
        was_leader = self.role is Role.LEADER
        self.role = Role.FOLLOWER
        self.rt.trace(TraceKind.ROLE_CHANGE, level=self.level, instance=self.instance,
                      role="follower", term=self.current_term, reason=reason)
        self.rt.cancel_timer((self.level, "heartbeat"))
        if not self.passive:
            self._arm_election_timer()
        if was_leader:
            for hook in self.on_lost_leadership:
                hook()

    def _adopt_term(self, term: int) -> None:
        if term > self.current_term:
            self.current_term = term
            self._persist("current_term", self.current_term)
            self.voted_for = None
            self._persist("voted_for", None)
            self.leader_id = None
