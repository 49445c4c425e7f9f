"""Handler-level behavior of the Fast Raft site state machine."""

import itertools

import pytest

from raftsim.core import (
    ApprovalMark,
    Configuration,
    EntryId,
    LogEntry,
    Payload,
    PayloadKind,
    classic_quorum_size,
)
from raftsim.fast_raft import FastRaftSite, ProtocolTimers, Role, VoteTally
from raftsim.messages import (
    AppendEntries,
    AppendEntriesResponse,
    CommitNotify,
    Propose,
    RequestVote,
    RequestVoteResponse,
    Vote,
)
from raftsim.trace import TraceKind

from conftest import app_entry, make_site


def deliver_votes(leader, index, entries_by_voter):
    for voter, entry in entries_by_voter.items():
        leader.on_vote(voter, Vote(voter, index, entry, leader.commit_index))


class TestPropose:
    def test_broadcast_fans_out_to_all_members(self):
        site = make_site("s2", leader="s1")
        site.propose(Payload.app(b"v"))
        targets = sorted(d for d, m in site.rt.sent if isinstance(m, Propose))
        assert targets == ["s1", "s2", "s3", "s4", "s5"]
        msg = site.rt.sent[0][1]
        assert msg.index == 1  # lastLogIndex 0 + 1
        assert ("local", "proposal", msg.entry.id) in site.rt.timers

    def test_retry_reuses_entry_id_and_resident_index(self):
        site = make_site("s2", leader="s1")
        eid = site.propose(Payload.app(b"v"))
        # the proposer's own copy landed at index 1 via self-delivery in the
        # real flow; emulate it here
        site.on_propose("s2", Propose(app_entry("s2", eid.sequence), 1))
        site.rt.sent.clear()
        site.on_timer(("local", "proposal", eid))
        resent = [m for _, m in site.rt.sent if isinstance(m, Propose)]
        assert resent and all(m.entry.id == eid and m.index == 1 for m in resent)

    def test_concurrent_proposers_target_same_index(self):
        a, b = make_site("s2", leader="s1"), make_site("s3", leader="s1")
        a.propose(Payload.app(b"e"))
        b.propose(Payload.app(b"f"))
        assert a.rt.sent[0][1].index == 1
        assert b.rt.sent[0][1].index == 1


class TestOnPropose:
    def test_insert_and_vote(self, follower):
        e = app_entry()
        follower.on_propose("s2", Propose(e, 1))
        assert follower.log.get(1).id == e.id
        assert follower.log.get(1).inserted_by is ApprovalMark.SELF
        votes = follower.rt.sent_to("s1", Vote)
        assert len(votes) == 1 and votes[0].entry.id == e.id and votes[0].index == 1

    def test_occupied_index_votes_for_resident(self, follower):
        f = app_entry("s3", 1)
        e = app_entry("s2", 1)
        follower.on_propose("s3", Propose(f, 1))
        follower.rt.sent.clear()
        follower.on_propose("s2", Propose(e, 1))
        assert follower.log.get(1).id == f.id
        votes = follower.rt.sent_to("s1", Vote)
        assert votes[0].entry.id == f.id

    def test_duplicate_committed_notifies_proposer(self, follower):
        e = app_entry("s3", 1, mark=ApprovalMark.LEADER)
        follower.on_append_entries("s1", AppendEntries(1, "s1", ((1, e),), 1))
        follower.rt.sent.clear()
        follower.on_propose("s3", Propose(app_entry("s3", 1), 2))
        notifies = follower.rt.sent_to("s3", CommitNotify)
        assert notifies and notifies[0].entry_id == e.id and notifies[0].index == 1
        assert not follower.rt.sent_to("s1", Vote)

    def test_vote_dropped_when_leader_unknown(self):
        site = make_site("s2")  # no leader elected yet
        site.on_propose("s2", Propose(app_entry(), 1))
        assert site.log.get(1) is not None
        assert not [m for _, m in site.rt.sent if isinstance(m, Vote)]


class TestOnVote:
    def test_first_vote_starts_tally(self, leader):
        e = app_entry()
        leader.on_vote("s2", Vote("s2", 4, e, 0))
        tally = leader.possible[4]
        assert tally.voters_for(e.id) == {"s2"}

    def test_same_entry_increments(self, leader):
        e = app_entry()
        leader.on_vote("s2", Vote("s2", 4, e, 0))
        leader.on_vote("s3", Vote("s3", 4, e, 0))
        assert leader.possible[4].voters_for(e.id) == {"s2", "s3"}

    def test_different_entry_adds_bucket(self, leader):
        e, f = app_entry("s2", 1), app_entry("s3", 1)
        leader.on_vote("s2", Vote("s2", 4, e, 0))
        leader.on_vote("s3", Vote("s3", 4, f, 0))
        tally = leader.possible[4]
        assert tally.voters_for(e.id) == {"s2"}
        assert tally.voters_for(f.id) == {"s3"}

    def test_nonmember_vote_ignored(self, leader):
        leader.on_vote("zz", Vote("zz", 4, app_entry(), 0))
        assert 4 not in leader.possible

    def test_stale_vote_ignored(self, leader):
        leader.commit_index = 3
        leader.on_vote("s2", Vote("s2", 2, app_entry(), 0))
        assert 2 not in leader.possible

    def test_vote_updates_next_index(self, leader):
        leader.on_vote("s2", Vote("s2", 4, app_entry(), 2))
        assert leader.next_index["s2"] == 3


class TestLeaderDecide:
    def test_fast_quorum_commits_immediately(self, leader):
        e = app_entry()
        deliver_votes(leader, 1, {v: e for v in ("s1", "s2", "s3", "s4")})
        assert leader.commit_index == 1
        assert leader.log.get(1).inserted_by is ApprovalMark.LEADER
        commits = leader.rt.events_of(TraceKind.COMMIT)
        assert commits and commits[0].data["cause"] == "fast"

    def test_classic_quorum_inserts_without_commit(self, leader):
        e, f = app_entry("s2", 1), app_entry("s3", 1)
        deliver_votes(leader, 1, {"s2": e, "s3": e, "s4": f})
        assert leader.commit_index == 0
        assert leader.log.get(1).id == e.id
        assert leader.log.get(1).inserted_by is ApprovalMark.LEADER
        # the classic track takes over: entries shipped to followers
        shipped = [m for _, m in leader.rt.sent if isinstance(m, AppendEntries) and m.entries]
        assert shipped

    def test_tie_breaks_to_smallest_entry_id(self, leader):
        e, f, g = app_entry("s2", 1), app_entry("s3", 1), app_entry("s4", 1)
        deliver_votes(leader, 1, {"s2": e, "s3": e, "s4": f, "s5": f})
        assert leader.log.get(1).id == e.id  # ("s2",1) < ("s3",1)

    def test_late_vote_completes_fast_quorum_after_insertion(self, leader):
        e = app_entry()
        deliver_votes(leader, 1, {v: e for v in ("s1", "s2", "s3")})
        assert leader.commit_index == 0  # inserted, awaiting fast or classic
        leader.on_vote("s4", Vote("s4", 1, e, 0))
        assert leader.commit_index == 1
        assert leader.rt.events_of(TraceKind.COMMIT)[0].data["cause"] == "fast"

    def test_decisions_are_sequential(self, leader):
        e2 = app_entry("s2", 2)
        deliver_votes(leader, 2, {v: e2 for v in ("s1", "s2", "s3", "s4", "s5")})
        # index 1 undecided: nothing may commit or insert at 2
        assert leader.commit_index == 0
        assert leader.log.get(2) is None

    def test_vote_for_committed_entry_elsewhere_becomes_null(self, leader):
        e = app_entry()
        deliver_votes(leader, 1, {v: e for v in ("s1", "s2", "s3", "s4")})
        assert leader.commit_index == 1
        # a straggler inserted e at index 2 and votes for it there
        leader.on_vote("s5", Vote("s5", 2, e, 0))
        tally = leader.possible[2]
        assert tally.voters_for(e.id) == set()
        assert "s5" in tally.null_reporters

    def test_all_null_tally_inserts_noop_filler(self, leader):
        e = app_entry()
        deliver_votes(leader, 1, {v: e for v in ("s1", "s2", "s3", "s4")})
        for voter in ("s2", "s3", "s4"):
            leader.on_vote(voter, Vote(voter, 2, e, 1))
        assert leader.log.get(2) is not None
        assert leader.log.get(2).payload.kind is PayloadKind.NULL


class TestHeartbeat:
    def test_entries_from_next_index_to_last_leader_index(self, leader):
        for i in (1, 2, 3, 4):
            e = app_entry("s2", i, term=1, mark=ApprovalMark.LEADER)
            leader.log.overwrite(i, e, 0)
        leader.commit_index = 4
        leader.next_index["s2"] = 2
        leader.rt.sent.clear()
        leader.leader_heartbeat()
        (msg,) = leader.rt.sent_to("s2", AppendEntries)
        assert [i for i, _ in msg.entries] == [2, 3, 4]

    def test_empty_heartbeat_when_follower_caught_up(self, leader):
        leader.next_index["s2"] = 5
        leader.rt.sent.clear()
        leader.leader_heartbeat()
        (msg,) = leader.rt.sent_to("s2", AppendEntries)
        assert msg.entries == ()

    def test_no_heartbeat_to_self(self, leader):
        leader.rt.sent.clear()
        leader.leader_heartbeat()
        assert not leader.rt.sent_to("s1")


class TestOnAppendEntries:
    def test_stale_term_rejected_with_own_term(self, follower):
        follower.current_term = 5
        follower.on_append_entries("s1", AppendEntries(3, "s1", (), 0))
        (resp,) = follower.rt.sent_to("s1", AppendEntriesResponse)
        assert resp.success is False and resp.term == 5

    def test_leader_choice_overwrites_self_approved(self, follower):
        f = app_entry("s3", 9)
        follower.on_propose("s3", Propose(f, 1))
        e = app_entry("s2", 1, term=1, mark=ApprovalMark.LEADER)
        follower.on_append_entries("s1", AppendEntries(1, "s1", ((1, e),), 0))
        assert follower.log.get(1).id == e.id
        assert follower.log.get(1).inserted_by is ApprovalMark.LEADER

    def test_mark_upgrade_on_same_entry(self, follower):
        e_self = app_entry("s2", 1)
        follower.on_propose("s2", Propose(e_self, 1))
        e_leader = e_self.with_mark(ApprovalMark.LEADER, 1)
        follower.on_append_entries("s1", AppendEntries(1, "s1", ((1, e_leader),), 0))
        assert follower.log.get(1).inserted_by is ApprovalMark.LEADER

    def test_commit_clamped_to_replicated_prefix(self, follower):
        entries = tuple(
            (i, app_entry("s2", i, term=1, mark=ApprovalMark.LEADER)) for i in (1, 2, 3, 4, 5)
        )
        follower.on_append_entries("s1", AppendEntries(1, "s1", entries, 7))
        assert follower.commit_index == 5

    def test_candidate_reverts_to_follower(self):
        site = make_site("s2", leader="s1")
        site.on_timer(("local", "election"))
        assert site.role is Role.CANDIDATE
        site.on_append_entries("s3", AppendEntries(site.current_term, "s3", (), 0))
        assert site.role is Role.FOLLOWER
        assert site.leader_id == "s3"

    def test_non_contiguous_batch_rejected(self, follower):
        entries = (
            (1, app_entry("s2", 1, mark=ApprovalMark.LEADER)),
            (3, app_entry("s2", 3, mark=ApprovalMark.LEADER)),
        )
        follower.on_append_entries("s1", AppendEntries(1, "s1", entries, 0))
        (resp,) = follower.rt.sent_to("s1", AppendEntriesResponse)
        assert resp.success is False

    def test_gap_above_frontier_rejected(self, follower):
        entries = ((4, app_entry("s2", 4, mark=ApprovalMark.LEADER)),)
        follower.on_append_entries("s1", AppendEntries(1, "s1", entries, 0))
        (resp,) = follower.rt.sent_to("s1", AppendEntriesResponse)
        assert resp.success is False and resp.ack_index == 0


class TestOnAppendEntriesResponse:
    @staticmethod
    def classic_commit_oracle(match_by_member, quorum, last_leader):
        """Largest k <= last_leader backed by a quorum of matchIndex values,
        found by direct enumeration."""
        for k in range(last_leader, 0, -1):
            if sum(1 for v in match_by_member.values() if v >= k) >= quorum:
                return k
        return 0

    def test_commit_on_classic_quorum(self, leader):
        for i in (1, 2, 3):
            leader.log.overwrite(i, app_entry("s2", i, term=1, mark=ApprovalMark.LEADER), 0)
        leader.match_index["s1"] = 3
        leader.on_append_entries_response("s2", AppendEntriesResponse("s2", 1, True, 3))
        assert leader.commit_index == 0  # two of five is not a quorum
        leader.on_append_entries_response("s3", AppendEntriesResponse("s3", 1, True, 3))
        expect = self.classic_commit_oracle(
            {"s1": 3, "s2": 3, "s3": 3, "s4": 0, "s5": 0}, 3, 3)
        assert leader.commit_index == expect == 3
        causes = [e.data["cause"] for e in leader.rt.events_of(TraceKind.COMMIT)]
        assert set(causes) == {"classic"}

    @pytest.mark.parametrize("acks", list(itertools.product([0, 1, 3], repeat=4)))
    def test_commit_matches_enumeration_oracle(self, acks):
        leader = make_site("s1", leader="s1")
        for i in (1, 2, 3):
            leader.log.overwrite(i, app_entry("s2", i, term=1, mark=ApprovalMark.LEADER), 0)
        match = {"s1": 3}
        for member, ack in zip(("s2", "s3", "s4", "s5"), acks):
            match[member] = ack
            leader.on_append_entries_response(
                member, AppendEntriesResponse(member, 1, True, ack))
        assert leader.commit_index == self.classic_commit_oracle(match, 3, 3)

    def test_higher_term_steps_down(self, leader):
        leader.on_append_entries_response("s2", AppendEntriesResponse("s2", 7, False, 0))
        assert leader.role is Role.FOLLOWER
        assert leader.current_term == 7

    def test_ack_for_committed_prefix_is_noop(self, leader):
        for i in (1, 2):
            leader.log.overwrite(i, app_entry("s2", i, term=1, mark=ApprovalMark.LEADER), 0)
        leader._commit_advance(2, "classic")
        before = leader.commit_index
        leader.on_append_entries_response("s2", AppendEntriesResponse("s2", 1, True, 1))
        assert leader.commit_index == before

    def test_failure_rewinds_next_index_to_acked_prefix(self, leader):
        leader.next_index["s2"] = 9
        leader.on_append_entries_response("s2", AppendEntriesResponse("s2", 1, False, 4))
        assert leader.next_index["s2"] == 5


class TestElections:
    def test_timeout_starts_candidacy_with_leader_approved_coordinates(self):
        site = make_site("s2", leader="s1")
        site.current_term = 3
        for i in range(1, 6):
            site.log.overwrite(i, app_entry("s3", i, term=3, mark=ApprovalMark.LEADER), 0)
        site.log.insert_if_empty(7, app_entry("s4", 9))  # self-approved: excluded
        site.on_timer(("local", "election"))
        assert site.role is Role.CANDIDATE
        assert site.current_term == 4
        assert site.voted_for == "s2"
        reqs = [m for _, m in site.rt.sent if isinstance(m, RequestVote)]
        assert len(reqs) == 4
        assert all(r.cand_last_log_index == 5 and r.cand_last_log_term == 3 for r in reqs)

    def test_repeat_timeout_increments_term_again(self):
        site = make_site("s2", leader="s1")
        site.on_timer(("local", "election"))
        site.on_timer(("local", "election"))
        assert site.current_term == 3

    def test_leader_does_not_self_elect(self, leader):
        leader.on_timer(("local", "election"))
        assert leader.role is Role.LEADER


class TestOnRequestVote:
    def test_lower_term_denied(self, follower):
        follower.current_term = 5
        follower.on_request_vote("s3", RequestVote(3, "s3", 0, 0))
        (resp,) = follower.rt.sent_to("s3", RequestVoteResponse)
        assert resp.vote_granted is False

    def test_grant_attaches_self_approved_entries(self):
        site = make_site("s2")
        for i in range(1, 6):
            site.log.overwrite(i, app_entry("s3", i, term=1, mark=ApprovalMark.LEADER), 0)
        site.commit_index = 5
        site.log.insert_if_empty(6, app_entry("s4", 20))
        site.log.insert_if_empty(8, app_entry("s5", 30))
        site.on_request_vote("s3", RequestVote(2, "s3", 5, 1))
        (resp,) = site.rt.sent_to("s3", RequestVoteResponse)
        assert resp.vote_granted is True
        assert [i for i, _ in resp.self_approved_entries] == [6, 8]

    def test_up_to_date_rule_ignores_self_approved(self):
        site = make_site("s2")
        site.log.insert_if_empty(9, app_entry("s4", 20))  # long self-approved tail
        site.on_request_vote("s3", RequestVote(1, "s3", 0, 0))
        (resp,) = site.rt.sent_to("s3", RequestVoteResponse)
        assert resp.vote_granted is True

    def test_denies_candidate_with_shorter_leader_log(self):
        site = make_site("s2")
        site.log.overwrite(1, app_entry("s3", 1, term=1, mark=ApprovalMark.LEADER), 0)
        site.on_request_vote("s3", RequestVote(2, "s3", 0, 0))
        (resp,) = site.rt.sent_to("s3", RequestVoteResponse)
        assert resp.vote_granted is False

    def test_single_vote_per_term(self):
        site = make_site("s2")
        site.on_request_vote("s3", RequestVote(2, "s3", 0, 0))
        site.rt.sent.clear()
        site.on_request_vote("s4", RequestVote(2, "s4", 0, 0))
        (resp,) = site.rt.sent_to("s4", RequestVoteResponse)
        assert resp.vote_granted is False


class TestRecovery:
    def test_quorum_of_grants_elects_and_recovers(self):
        site = make_site("s2")
        site.on_timer(("local", "election"))
        e = app_entry("s4", 7)
        grant = RequestVoteResponse("s3", site.current_term, True, ((1, e),))
        site.on_request_vote_response("s3", grant)
        assert site.role is Role.CANDIDATE
        grant2 = RequestVoteResponse("s4", site.current_term, True, ((1, e),))
        site.on_request_vote_response("s4", grant2)
        assert site.role is Role.LEADER
        # two electors held e self-approved at 1: recovery re-chooses it
        assert site.log.get(1).id == e.id
        assert site.log.get(1).inserted_by is ApprovalMark.LEADER
        assert site.log.get(1).term == site.current_term

    def test_fast_committed_entry_survives_via_recovery(self):
        # entry e held self-approved by a fast quorum; any classic quorum of
        # electors includes at least two holders, so e wins every re-tally
        holders = {"s2", "s3", "s4", "s5"}
        for electors in itertools.combinations(("s3", "s4", "s5"), 2):
            site = make_site("s2")
            e = app_entry("s9", 1)
            site.log.insert_if_empty(1, e)  # own self-approved copy
            site.on_timer(("local", "election"))
            for elector in electors:
                attached = ((1, e),) if elector in holders else ()
                site.on_request_vote_response(
                    elector, RequestVoteResponse(elector, site.current_term, True, attached))
            assert site.role is Role.LEADER
            assert site.log.get(1).id == e.id

    def test_grant_from_nonmember_not_counted(self):
        site = make_site("s2")
        site.on_timer(("local", "election"))
        for voter in ("zz", "yy"):
            site.on_request_vote_response(
                voter, RequestVoteResponse(voter, site.current_term, True, ()))
        assert site.role is Role.CANDIDATE

    def test_recovery_can_fill_gap_below_recovered_entry(self):
        # electors report an entry at 2 but nothing at 1: the quorum has
        # implicitly reported "nothing" at 1, so a no-op filler unblocks it
        site = make_site("s2")
        site.on_timer(("local", "election"))
        e = app_entry("s9", 5)
        for elector in ("s3", "s4"):
            site.on_request_vote_response(
                elector,
                RequestVoteResponse(elector, site.current_term, True, ((2, e),)))
        assert site.role is Role.LEADER
        assert site.log.get(1).payload.kind is PayloadKind.NULL
        # decisions stay sequential: index 2 is decided only once the filler
        # at 1 commits through the classic track
        assert site.log.get(2) is None
        for elector in ("s3", "s4"):
            site.on_append_entries_response(
                elector, AppendEntriesResponse(elector, site.current_term, True, 1))
        assert site.commit_index == 1
        assert site.log.get(2).id == e.id
