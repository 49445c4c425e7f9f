"""Dynamic membership: announced joins with catch-up and a non-voting
phase, announced leaves, and silent-leave detection via the member timeout.

All configuration changes (joins and leaves alike) serialize through one
queue at the leader, so committed configurations always differ from their
predecessor by exactly one site.  A joining site is a non-voting member
while it is caught up: it receives AppendEntries but its votes are never
counted toward quorums, and it is excluded from quorum denominators until
the configuration entry that includes it is inserted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from raftsim.core import ApprovalMark, LogEntry, Payload, PayloadKind, SiteId
from raftsim.messages import (
    AppendEntries,
    AppendEntriesResponse,
    JoinAccepted,
    JoinRequest,
    LeaveRequest,
    Message,
)
from raftsim.trace import TraceKind

if TYPE_CHECKING:  # pragma: no cover
    from raftsim.fast_raft import FastRaftSite


class JoinPhase(enum.Enum):
    CATCHING_UP = "catching_up"
    CONFIG_PENDING = "config_pending"


@dataclass(slots=True)
class _Change:
    kind: str  # "join" | "leave"
    site: SiteId
    phase: JoinPhase = JoinPhase.CATCHING_UP
    acked: int = 0
    missed_rounds: int = 0
    config_index: int = 0


class JoinManager:
    """Leader-side configuration-change queue plus the joiner-side request
    loop.  Owned by a :class:`FastRaftSite` and driven from its handlers."""

    def __init__(self, site: "FastRaftSite"):
        self.site = site
        self.queue: list[_Change] = []
        self.active: Optional[_Change] = None
        self._pending: set[tuple[str, SiteId]] = set()
        self._known_sites: tuple[SiteId, ...] = ()

    # -- joiner side ---------------------------------------------------------

    def request_join(self, known_sites: tuple[SiteId, ...]) -> None:
        """Broadcast a join request to the sites we know about; re-sent every
        join timeout until accepted."""
        self._known_sites = tuple(known_sites)
        for target in self._known_sites:
            self.site.rt.send(target, JoinRequest(self.site.site_id,
                                                  level=self.site.level))
        self.site.rt.set_timer((self.site.level, "join_retry"),
                               self.site.timers.join_timeout_ms)

    def retry_join(self) -> None:
        if self.site.passive and self._known_sites:
            self.request_join(self._known_sites)

    def _on_accepted(self, msg: JoinAccepted) -> None:
        from raftsim.core import Configuration

        if not self.site.passive:
            return
        self.site.configuration = Configuration(msg.members)
        self.site._persist("configuration", self.site.configuration)
        self.site.passive = False
        self.site.rt.cancel_timer((self.site.level, "join_retry"))
        self.site._arm_election_timer()

    # -- leader side -----------------------------------------------------------

    def on_message(self, sender: SiteId, msg: Message) -> None:
        from raftsim.fast_raft import Role

        if isinstance(msg, JoinAccepted):
            self._on_accepted(msg)
            return
        if self.site.role is not Role.LEADER:
            if self.site.leader_id is not None and self.site.leader_id != self.site.site_id:
                self.site.rt.send(self.site.leader_id, msg)  # redirect
            return
        if isinstance(msg, JoinRequest):
            self._on_join_request(msg.joiner)
        elif isinstance(msg, LeaveRequest):
            self._enqueue("leave", msg.leaver)

    def _on_join_request(self, joiner: SiteId) -> None:
        if joiner in self.site.configuration:
            # the earlier acceptance may have been lost; repeat it
            self.site.rt.send(joiner, JoinAccepted(
                joiner, self.site.configuration.members, level=self.site.level))
            return
        self._enqueue("join", joiner)

    def request_silent_leave(self, target: SiteId) -> None:
        """Member timeout hit: propose removal on the silent site's behalf."""
        self._enqueue("leave", target)

    def _enqueue(self, kind: str, target: SiteId) -> None:
        if (kind, target) in self._pending:
            return  # duplicate request
        self._pending.add((kind, target))
        self.queue.append(_Change(kind, target))
        self._pump()

    def _pump(self) -> None:
        """Start the next queued change; strictly one at a time."""
        while self.active is None and self.queue:
            change = self.queue.pop(0)
            if change.kind == "join":
                if change.site in self.site.configuration:
                    self._pending.discard(("join", change.site))
                    continue
                self.active = change
                self._send_chunk()
            else:
                if change.site not in self.site.configuration:
                    self._pending.discard(("leave", change.site))
                    continue
                change.phase = JoinPhase.CONFIG_PENDING
                self.active = change
                change.config_index = self._propose_configuration(
                    self.site.configuration.without_member(change.site).members)

    def _propose_configuration(self, members: tuple[SiteId, ...]) -> int:
        site = self.site
        entry = LogEntry(site.next_entry_id(), Payload.configuration(members),
                         site.current_term, ApprovalMark.LEADER)
        index = site.log.last_leader_index + 1
        site._leader_insert(index, entry)
        site._ship_entries()
        return index

    def _send_chunk(self) -> None:
        """Stream the next slice of the committed prefix to the joiner."""
        site, change = self.site, self.active
        lo = change.acked + 1
        hi = min(change.acked + site.timers.catchup_chunk, site.commit_index)
        entries = tuple(site.log.entries_in(lo, hi)) if hi >= lo else ()
        site.rt.send(change.site, AppendEntries(
            site.current_term, site.site_id, entries, site.commit_index,
            level=site.level))

    def on_catchup_ack(self, sender: SiteId, msg: AppendEntriesResponse) -> bool:
        """Route an AppendEntries response from the active joiner; returns
        True when consumed."""
        change = self.active
        if change is None or change.kind != "join" or sender != change.site:
            return False
        if change.phase is not JoinPhase.CATCHING_UP:
            return False
        change.missed_rounds = 0
        change.acked = max(change.acked, msg.ack_index)
        if change.acked >= self.site.commit_index:
            self._finish_catchup()
        else:
            self._send_chunk()
        return True

    def _finish_catchup(self) -> None:
        site, change = self.site, self.active
        change.phase = JoinPhase.CONFIG_PENDING
        site.next_index[change.site] = change.acked + 1
        site.match_index[change.site] = change.acked
        site.fast_match_index[change.site] = 0
        change.config_index = self._propose_configuration(
            site.configuration.with_member(change.site).members)

    def on_heartbeat_round(self) -> None:
        """Advance the active joiner's stream and miss counter; a joiner that
        stops acking for a full member timeout aborts the join."""
        change = self.active
        if change is None or change.kind != "join":
            return
        if change.phase is not JoinPhase.CATCHING_UP:
            return
        change.missed_rounds += 1
        if change.missed_rounds >= self.site.timers.member_timeout_rounds:
            self._pending.discard(("join", change.site))
            self.active = None
            self._pump()
            return
        self._send_chunk()

    def on_config_committed(self, index: int, entry: LogEntry) -> None:
        """The configuration entry we were waiting on is durable: release the
        joiner (or step down, for a leader that removed itself) and start the
        next queued change."""
        site = self.site
        change = self.active
        if change is not None and change.config_index == index:
            if change.kind == "join":
                site.rt.send(change.site, JoinAccepted(
                    change.site, entry.payload.members, level=site.level))
            self._pending.discard((change.kind, change.site))
            self.active = None
        if site.site_id not in site.configuration:
            site._go_passive()
            return
        self._pump()
