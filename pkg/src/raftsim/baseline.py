"""Classic Raft, used as the experimental control.

Proposals relay through the leader, the log is dense and append-only with
conflict truncation, commits take the standard three hops (propose,
replicate, acknowledge), and the up-to-date rule compares the whole log.
Membership is administrator-driven: ``admin_add`` / ``admin_remove`` append
single-change configuration entries at the leader.  It shares the
simulator, trace format, checker, and timer defaults with Fast Raft so
experiment comparisons isolate the protocol difference only.
"""

from __future__ import annotations

from typing import Callable, Optional

from raftsim.core import (
    ApprovalMark,
    Configuration,
    EntryId,
    LogEntry,
    Payload,
    PayloadKind,
    ProtocolViolation,
    SiteId,
    Log,
)
from raftsim.fast_raft import ProtocolTimers, Role, entry_ref
from raftsim.messages import (
    AppendEntries,
    AppendEntriesResponse,
    CommitNotify,
    Message,
    Propose,
    RequestVote,
    RequestVoteResponse,
    Vote,
)
from raftsim.simnet import Runtime
from raftsim.trace import TraceKind


class ClassicRaftSite:
    """A single classic Raft participant (same event-handler contract as
    :class:`raftsim.fast_raft.FastRaftSite`)."""

    def __init__(
        self,
        rt: Runtime,
        configuration: Configuration,
        timers: ProtocolTimers,
        instance: str = "c0",
        initial_leader: Optional[SiteId] = None,
    ):
        self.rt = rt
        self.site_id = rt.site_id
        self.level = "local"
        self.instance = instance
        self.timers = timers

        self.current_term = 0
        self.voted_for: Optional[SiteId] = None
        self.log = Log()
        self.configuration = configuration

        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.leader_id: Optional[SiteId] = None
        self.passive = False
        self._committed_ids: dict[EntryId, int] = {}
        self._entry_seq = 0

        self.next_index: dict[SiteId, int] = {}
        self.match_index: dict[SiteId, int] = {}
        self._votes_granted: set[SiteId] = set()

        self.outstanding: dict[EntryId, Payload] = {}
        self._propose_started: set[EntryId] = set()
        self.on_committed: list[Callable[[int, LogEntry], None]] = []
        self.on_notified: list[Callable[[EntryId, int], None]] = []

        if initial_leader is not None:
            self.current_term = 1
            self.leader_id = initial_leader
            self.voted_for = initial_leader
            if initial_leader == self.site_id:
                self.role = Role.LEADER
                self._init_leader_maps()
        self._persist_all()

    # -- persistence --------------------------------------------------------

    def _persist(self, name: str, value: object) -> None:
        self.rt.store.put(self.level, name, value)

    def _persist_all(self) -> None:
        self._persist("current_term", self.current_term)
        self._persist("voted_for", self.voted_for)
        self._persist("configuration", self.configuration)
        self._persist("entry_seq", self._entry_seq)
        for i, e in self.log.items():
            self.rt.store.log_put(self.level, "log", i, e)

    def _store_entry(self, index: int, entry: LogEntry) -> None:
        self.rt.store.log_put(self.level, "log", index, entry)

    def on_recover(self) -> None:
        store = self.rt.store
        self.current_term = store.get(self.level, "current_term", 0)
        self.voted_for = store.get(self.level, "voted_for")
        self.configuration = store.get(self.level, "configuration", self.configuration)
        self._entry_seq = store.get(self.level, "entry_seq", 0)
        self.log.restore(store.log_snapshot(self.level, "log"))
        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.leader_id = None
        self._committed_ids = {}
        self.outstanding = {}
        self._arm_election_timer()

    def on_start(self) -> None:
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
        self._entry_seq += 1
        self._persist("entry_seq", self._entry_seq)
        return EntryId(self.site_id, self._entry_seq)

    # -- dispatch --------------------------------------------------------------

    def on_message(self, sender: SiteId, msg: Message) -> None:
        if self.passive:
            return
        if isinstance(msg, Propose):
            self.on_propose(sender, msg)
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

    def on_timer(self, key: tuple) -> None:
        kind = key[1]
        if kind == "election":
            if self.role is not Role.LEADER:
                self.on_election_timeout()
        elif kind == "heartbeat":
            if self.role is Role.LEADER:
                self.leader_heartbeat()
        elif kind == "proposal":
            self._retry_proposal(key[2])

    # -- proposing ----------------------------------------------------------------

    def propose(self, payload: Payload, entry_id: Optional[EntryId] = None) -> EntryId:
        """Send a proposal to the leader; re-sent on proposal timeout."""
        eid = entry_id or self.next_entry_id()
        self.outstanding[eid] = payload
        if eid not in self._propose_started:
            self._propose_started.add(eid)
            self.rt.trace(TraceKind.PROPOSE_START,
                          level=self.level, instance=self.instance,
                          entry=f"{eid.proposer}#{eid.sequence}",
                          payload=payload.kind.value)
        self._send_proposal(eid, payload)
        return eid

    def _send_proposal(self, eid: EntryId, payload: Payload) -> None:
        entry = LogEntry(eid, payload, self.current_term, ApprovalMark.LEADER)
        if self.leader_id is not None:
            self.rt.send(self.leader_id, Propose(entry, 0))
        self.rt.set_timer((self.level, "proposal", eid), self.timers.proposal_timeout_ms)

    def _retry_proposal(self, eid: EntryId) -> None:
        payload = self.outstanding.get(eid)
        if payload is not None:
            self._send_proposal(eid, payload)

    def on_propose(self, sender: SiteId, msg: Propose) -> None:
        if self.role is not Role.LEADER:
            if self.leader_id is not None and self.leader_id != self.site_id:
                self.rt.send(self.leader_id, msg)  # redirect toward the leader
            return
        eid = msg.entry.id
        committed_at = self._committed_ids.get(eid)
        if committed_at is not None:
            self._notify_proposer(eid, committed_at)
            return
        if self.log.find_entry(eid) is not None:
            return  # already appended, replication in flight
        self._append_and_ship(msg.entry.payload, eid)

    def _append_and_ship(self, payload: Payload, eid: EntryId) -> None:
        index = self.log.last_log_index + 1
        entry = LogEntry(eid, payload, self.current_term, ApprovalMark.LEADER)
        self.log.overwrite(index, entry, self.commit_index)
        self._store_entry(index, entry)
        self.rt.trace(TraceKind.INSERT, level=self.level, instance=self.instance,
                      index=index, entry=entry_ref(entry), mark="leader",
                      term=entry.term)
        if payload.kind is PayloadKind.CONFIGURATION:
            self._adopt_configuration(index, entry)
        self.match_index[self.site_id] = self.log.last_log_index
        for member in self.configuration.members:
            if member != self.site_id:
                self._send_append(member)
        if len(self.configuration) == 1:
            self._maybe_commit()

    # -- membership (administrator-driven) -------------------------------------

    def admin_add(self, site: SiteId) -> None:
        if self.role is not Role.LEADER or site in self.configuration:
            return
        members = self.configuration.with_member(site).members
        self._append_and_ship(Payload.configuration(members), self.next_entry_id())

    def admin_remove(self, site: SiteId) -> None:
        if self.role is not Role.LEADER or site not in self.configuration:
            return
        members = self.configuration.without_member(site).members
        self._append_and_ship(Payload.configuration(members), self.next_entry_id())

    def _adopt_configuration(self, index: int, entry: LogEntry) -> None:
        self.configuration = Configuration(entry.payload.members)
        self._persist("configuration", self.configuration)
        self.rt.trace(TraceKind.CONFIG_CHANGE, level=self.level,
                      instance=self.instance, phase="inserted", index=index,
                      members=list(entry.payload.members))
        if self.role is Role.LEADER:
            for m in entry.payload.members:
                self.next_index.setdefault(m, self.log.last_log_index + 1)
                self.match_index.setdefault(m, 0)
        if self.site_id not in entry.payload.members and self.role is not Role.LEADER:
            self.passive = True
            self.rt.cancel_timer((self.level, "election"))

    # -- replication ------------------------------------------------------------

    def leader_heartbeat(self) -> None:
        for member in self.configuration.members:
            if member != self.site_id:
                self._send_append(member)
        self._arm_heartbeat()

    def _send_append(self, member: SiteId) -> None:
        nxt = self.next_index.get(member, self.log.last_log_index + 1)
        prev = nxt - 1
        prev_entry = self.log.get(prev)
        prev_term = prev_entry.term if prev_entry is not None else 0
        entries = tuple(self.log.entries_in(nxt, self.log.last_log_index))
        self.rt.send(member, AppendEntries(
            self.current_term, self.site_id, entries, self.commit_index,
            prev_log_index=prev, prev_log_term=prev_term))

    def on_append_entries(self, sender: SiteId, msg: AppendEntries) -> None:
        if msg.term < self.current_term:
            self.rt.send(sender, AppendEntriesResponse(
                self.site_id, self.current_term, False, self.commit_index))
            return
        self._adopt_term(msg.term)
        if self.role is not Role.FOLLOWER:
            self._become_follower()
        self.leader_id = msg.leader_id
        self._arm_election_timer()
        if msg.prev_log_index > 0:
            resident = self.log.get(msg.prev_log_index)
            if resident is None or resident.term != msg.prev_log_term:
                # consistency check failed: the leader rewinds nextIndex
                self.rt.send(sender, AppendEntriesResponse(
                    self.site_id, self.current_term, False, self.commit_index))
                return
        for i, entry in msg.entries:
            resident = self.log.get(i)
            if resident is not None and resident.id == entry.id and resident.term == entry.term:
                continue
            if resident is not None:
                self.log.truncate_from(i, self.commit_index)
                self.rt.store.log_truncate_from(self.level, "log", i)
            self.log.overwrite(i, entry, self.commit_index)
            self._store_entry(i, entry)
            self.rt.trace(TraceKind.INSERT, level=self.level, instance=self.instance,
                          index=i, entry=entry_ref(entry), mark="leader",
                          term=entry.term)
            if entry.payload.kind is PayloadKind.CONFIGURATION:
                self._adopt_configuration(i, entry)
        ack = msg.prev_log_index + len(msg.entries)
        new_commit = min(msg.leader_commit, self.log.last_log_index)
        if new_commit > self.commit_index:
            self._commit_advance(new_commit, "learned")
        self.rt.send(sender, AppendEntriesResponse(
            self.site_id, self.current_term, True, ack))

    def on_append_entries_response(self, sender: SiteId, msg: AppendEntriesResponse) -> None:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            if self.role is not Role.FOLLOWER:
                self._become_follower()
            return
        if self.role is not Role.LEADER or sender not in self.configuration:
            return
        if msg.success:
            self.next_index[sender] = msg.ack_index + 1
            if msg.ack_index > self.match_index.get(sender, 0):
                self.match_index[sender] = msg.ack_index
            self._maybe_commit()
        else:
            self.next_index[sender] = msg.ack_index + 1

    def _maybe_commit(self) -> None:
        self.match_index[self.site_id] = self.log.last_log_index
        quorum = self.configuration.classic_quorum
        for k in range(self.log.last_log_index, self.commit_index, -1):
            entry = self.log.get(k)
            if entry is None or entry.term != self.current_term:
                continue
            count = sum(1 for m in self.configuration.members
                        if self.match_index.get(m, 0) >= k)
            if count >= quorum:
                self._commit_advance(k, "classic")
                return

    def _commit_advance(self, to_index: int, cause: str) -> None:
        while self.commit_index < to_index:
            i = self.commit_index + 1
            entry = self.log.get(i)
            if entry is None:
                raise ProtocolViolation(f"{self.site_id} committing hole at {i}")
            self.commit_index = i
            self._committed_ids[entry.id] = i
            self.rt.trace(TraceKind.COMMIT, level=self.level, instance=self.instance,
                          index=i, entry=entry_ref(entry), term=entry.term,
                          cause=cause, payload=entry.payload.kind.value)
            if entry.payload.kind is PayloadKind.CONFIGURATION:
                self.rt.trace(TraceKind.CONFIG_CHANGE, level=self.level,
                              instance=self.instance, phase="committed", index=i,
                              members=list(entry.payload.members))
                if self.site_id not in entry.payload.members and self.role is Role.LEADER:
                    self._become_follower()
                    self.passive = True
            if cause != "learned":
                self._notify_proposer(entry.id, i)
            for hook in self.on_committed:
                hook(i, entry)

    def _notify_proposer(self, eid: EntryId, index: int) -> None:
        if eid.proposer == self.site_id:
            self._on_commit_notified(eid, index)
        else:
            self.rt.send(eid.proposer, CommitNotify(eid, index))

    def _on_commit_notified(self, eid: EntryId, index: int) -> None:
        if eid in self.outstanding:
            del self.outstanding[eid]
            self.rt.cancel_timer((self.level, "proposal", eid))
            self.rt.trace(TraceKind.COMMIT_NOTIFIED, level=self.level,
                          instance=self.instance,
                          entry=f"{eid.proposer}#{eid.sequence}", index=index)
            for hook in self.on_notified:
                hook(eid, index)

    # -- elections ------------------------------------------------------------------

    def on_election_timeout(self) -> None:
        self.role = Role.CANDIDATE
        self.current_term += 1
        self._persist("current_term", self.current_term)
        self.voted_for = self.site_id
        self._persist("voted_for", self.voted_for)
        self.leader_id = None
        self._votes_granted = {self.site_id}
        self.rt.trace(TraceKind.ROLE_CHANGE, level=self.level, instance=self.instance,
                      role="candidate", term=self.current_term)
        last = self.log.last_log_index
        last_entry = self.log.get(last)
        last_term = last_entry.term if last_entry is not None else 0
        for member in self.configuration.members:
            if member != self.site_id:
                self.rt.send(member, RequestVote(self.current_term, self.site_id,
                                                 last, last_term))
        self._arm_election_timer()
        if len(self._votes_granted) >= self.configuration.classic_quorum:
            self._become_leader()

    def on_request_vote(self, sender: SiteId, msg: RequestVote) -> None:
        if msg.candidate_id not in self.configuration:
            return
        if msg.term < self.current_term:
            self.rt.send(sender, RequestVoteResponse(
                self.site_id, self.current_term, False))
            return
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            if self.role is not Role.FOLLOWER:
                self._become_follower()
        last = self.log.last_log_index
        last_entry = self.log.get(last)
        last_term = last_entry.term if last_entry is not None else 0
        up_to_date = (msg.cand_last_log_term > last_term) or (
            msg.cand_last_log_term == last_term and msg.cand_last_log_index >= last)
        granted = self.voted_for in (None, msg.candidate_id) and up_to_date
        if granted:
            self.voted_for = msg.candidate_id
            self._persist("voted_for", self.voted_for)
            self._arm_election_timer()
        self.rt.send(sender, RequestVoteResponse(
            self.site_id, self.current_term, granted))

    def on_request_vote_response(self, sender: SiteId, msg: RequestVoteResponse) -> None:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            if self.role is not Role.FOLLOWER:
                self._become_follower()
            return
        if self.role is not Role.CANDIDATE or msg.term != self.current_term:
            return
        if not msg.vote_granted or sender not in self.configuration:
            return
        self._votes_granted.add(sender)
        if len(self._votes_granted) >= self.configuration.classic_quorum:
            self._become_leader()

    def _init_leader_maps(self) -> None:
        start = self.log.last_log_index + 1
        self.next_index = {m: start for m in self.configuration.members}
        self.match_index = {m: 0 for m in self.configuration.members}
        self.match_index[self.site_id] = self.log.last_log_index

    def _become_leader(self) -> None:
        self.role = Role.LEADER
        self.leader_id = self.site_id
        self.rt.trace(TraceKind.ROLE_CHANGE, level=self.level, instance=self.instance,
                      role="leader", term=self.current_term)
        self.rt.cancel_timer((self.level, "election"))
        self._init_leader_maps()
        for member in self.configuration.members:
            if member != self.site_id:
                self._send_append(member)
        self._arm_heartbeat()

    def _become_follower(self) -> None:
        self.role = Role.FOLLOWER
        self.rt.trace(TraceKind.ROLE_CHANGE, level=self.level, instance=self.instance,
                      role="follower", term=self.current_term)
        self.rt.cancel_timer((self.level, "heartbeat"))
        if not self.passive:
            self._arm_election_timer()

    def _adopt_term(self, term: int) -> None:
        if term > self.current_term:
            self.current_term = term
            self._persist("current_term", self.current_term)
            self.voted_for = None
            self._persist("voted_for", None)
            self.leader_id = None
