import random

import pytest

from raftsim.core import ApprovalMark, Configuration, EntryId, LogEntry, Payload
from raftsim.fast_raft import FastRaftSite, ProtocolTimers
from raftsim.simnet import SiteStore
from raftsim.trace import TraceEvent, TraceKind


class FakeRuntime:
    """Stands in for the simulator in handler-level tests: records sends,
    timer operations, and trace events instead of scheduling them."""

    def __init__(self, site_id, seed=1):
        self.site_id = site_id
        self.now = 0.0
        self.rng = random.Random(seed)
        self.store = SiteStore()
        self.sent = []
        self.timers = {}
        self.events = []
        self._seq = 0

    def send(self, dst, msg):
        self.sent.append((dst, msg))

    def set_timer(self, key, delay_ms):
        self.timers[key] = delay_ms

    def cancel_timer(self, key):
        self.timers.pop(key, None)

    def trace(self, kind, **data):
        self._seq += 1
        self.events.append(TraceEvent(self.now, self._seq, self.site_id, kind, data))

    # test helpers
    def sent_to(self, dst, msg_type=None):
        return [m for d, m in self.sent if d == dst
                and (msg_type is None or isinstance(m, msg_type))]

    def events_of(self, kind):
        return [e for e in self.events if e.kind == kind]


FIVE = Configuration(("s1", "s2", "s3", "s4", "s5"))


def make_site(site_id="s1", members=FIVE.members, leader=None, timers=None,
              member=True) -> FastRaftSite:
    rt = FakeRuntime(site_id)
    return FastRaftSite(rt, Configuration(tuple(members)),
                        timers or ProtocolTimers(), instance="c0",
                        initial_leader=leader, member=member)


def app_entry(proposer="s2", seq=1, term=1, mark=ApprovalMark.SELF, data=b"v"):
    return LogEntry(EntryId(proposer, seq), Payload.app(data), term, mark)


@pytest.fixture
def leader():
    """A five-site configuration's pre-elected leader at term 1."""
    return make_site("s1", leader="s1")


@pytest.fixture
def follower():
    """A five-site follower that already knows the leader."""
    return make_site("s2", leader="s1")
