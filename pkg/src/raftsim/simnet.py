"""Seeded discrete-event simulation substrate.

One :class:`Simulation` drives a set of site state machines through a
totally ordered event queue keyed by (time, seq).  All randomness flows
from a single ``random.Random(seed)`` (Mersenne Twister) with a fixed draw
order: per send, the loss test is drawn first, then the delay sample (if
the link's delay distribution is random); timer randomization draws occur
at arm time in event order.  Identical (scenario, seed) pairs therefore
produce byte-identical traces.

Sites are event handlers: the simulation calls ``on_message`` /
``on_timer`` / ``on_recover`` and the site reacts through its
:class:`Runtime` (sends, timer ops, trace emission, stable storage).
The whole run is strictly single-threaded.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from raftsim.core import LogEntry, SiteId
from raftsim.messages import Message
from raftsim.trace import TraceEvent, TraceKind


class SimBudgetExceeded(RuntimeError):
    """Event budget ran out; carries the partial trace."""

    def __init__(self, budget: int, trace: list[TraceEvent]):
        super().__init__(f"event budget {budget} exceeded")
        self.trace = trace


@dataclass(frozen=True, slots=True)
class DelaySpec:
    """One-way delay distribution: fixed value, uniform range, or an
    empirical table sampled uniformly."""

    kind: str = "fixed"
    ms: float = 0.5
    lo: float = 0.0
    hi: float = 0.0
    table: tuple[float, ...] = ()

    def sample(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return self.ms
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi)
        if self.kind == "table":
            return self.table[rng.randrange(len(self.table))]
        raise ValueError(f"unknown delay kind {self.kind!r}")

    @property
    def max_delay(self) -> float:
        if self.kind == "fixed":
            return self.ms
        if self.kind == "uniform":
            return self.hi
        return max(self.table)


@dataclass(slots=True)
class LinkParams:
    loss: float = 0.0
    delay: DelaySpec = field(default_factory=DelaySpec)


class LinkModel:
    """Per ordered site pair loss/delay, defaulting by link class:
    intra-cluster for co-located pairs (including self-sends), inter-cluster
    otherwise.  Specific pairs can be overridden, including mid-run (fault
    injection).  Sampled delays are clamped to a floor > 0 so timeouts can
    always exceed message delays."""

    def __init__(
        self,
        cluster_of: dict[SiteId, str],
        intra: LinkParams,
        inter: LinkParams,
        floor_ms: float = 0.01,
    ):
        self.cluster_of = dict(cluster_of)
        self.intra = intra
        self.inter = inter
        self.floor_ms = floor_ms
        self.overrides: dict[tuple[SiteId, SiteId], LinkParams] = {}

    def params(self, src: SiteId, dst: SiteId) -> LinkParams:
        override = self.overrides.get((src, dst))
        if override is not None:
            return override
        same = self.cluster_of.get(src) == self.cluster_of.get(dst)
        return self.intra if same else self.inter

    def set_override(self, src: SiteId, dst: SiteId, params: LinkParams) -> None:
        self.overrides[(src, dst)] = params

    def sample(self, src: SiteId, dst: SiteId, rng: random.Random) -> tuple[bool, float]:
        """(lost, delay_ms).  Loss is drawn before delay, always in that order."""
        p = self.params(src, dst)
        lost = rng.random() < p.loss
        delay = max(p.delay.sample(rng), self.floor_ms)
        return lost, delay

    @property
    def max_delay(self) -> float:
        candidates = [self.intra.delay.max_delay, self.inter.delay.max_delay]
        candidates += [p.delay.max_delay for p in self.overrides.values()]
        return max(candidates)


class SiteStore:
    """Write-through stable storage for one site.

    Persistent scalar fields live under (namespace, field) keys; logs are
    mirrored slot-by-slot so each mutation costs O(1).  Contents survive
    crashes and are read back on recovery.
    """

    def __init__(self) -> None:
        self._scalars: dict[tuple[str, str], object] = {}
        self._logs: dict[tuple[str, str], dict[int, LogEntry]] = {}

    def put(self, namespace: str, name: str, value: object) -> None:
        self._scalars[(namespace, name)] = value

    def get(self, namespace: str, name: str, default: object = None) -> object:
        return self._scalars.get((namespace, name), default)

    def log_put(self, namespace: str, name: str, index: int, entry: LogEntry) -> None:
        self._logs.setdefault((namespace, name), {})[index] = entry

    def log_truncate_from(self, namespace: str, name: str, index: int) -> None:
        slots = self._logs.get((namespace, name), {})
        for i in [i for i in slots if i >= index]:
            del slots[i]

    def log_snapshot(self, namespace: str, name: str) -> dict[int, LogEntry]:
        return dict(self._logs.get((namespace, name), {}))


class Site(Protocol):
    site_id: SiteId

    def on_message(self, sender: SiteId, msg: Message) -> None: ...

    def on_timer(self, key: tuple) -> None: ...

    def on_recover(self) -> None: ...

    def on_start(self) -> None: ...


@dataclass(frozen=True, slots=True)
class _Deliver:
    sender: SiteId
    dst: SiteId
    msg: Message


@dataclass(frozen=True, slots=True)
class _TimerFire:
    site: SiteId
    key: tuple
    generation: int


@dataclass(frozen=True, slots=True)
class _Crash:
    site: SiteId


@dataclass(frozen=True, slots=True)
class _Recover:
    site: SiteId


@dataclass(frozen=True, slots=True)
class _Action:
    label: str
    fn: Callable[[], None]


class Runtime:
    """Per-site facade over the simulation: the only way a site interacts
    with the world."""

    def __init__(self, sim: "Simulation", site_id: SiteId):
        self._sim = sim
        self.site_id = site_id
        self.store = sim.store_for(site_id)

    @property
    def now(self) -> float:
        return self._sim.now

    @property
    def rng(self) -> random.Random:
        return self._sim.rng

    def send(self, dst: SiteId, msg: Message) -> None:
        self._sim.post_send(self.site_id, dst, msg)

    def set_timer(self, key: tuple, delay_ms: float) -> None:
        self._sim.set_timer(self.site_id, key, delay_ms)

    def cancel_timer(self, key: tuple) -> None:
        self._sim.cancel_timer(self.site_id, key)

    def trace(self, kind: TraceKind, **data: object) -> None:
        self._sim.emit(self.site_id, kind, data)


class Simulation:
    """Virtual clock + event queue + network + stable storage + trace."""

    def __init__(self, link_model: LinkModel, seed: int):
        self.links = link_model
        self.rng = random.Random(seed)
        self.seed = seed
        self.now: float = 0.0
        self._queue: list[tuple[float, int, object]] = []
        self._seq = 0
        self.sites: dict[SiteId, Site] = {}
        self.down: set[SiteId] = set()
        self._stores: dict[SiteId, SiteStore] = {}
        self._timer_gen: dict[tuple[SiteId, tuple], int] = {}
        self._timer_armed: dict[tuple[SiteId, tuple], int] = {}
        self.trace: list[TraceEvent] = []
        self.post_event_hooks: list[Callable[[Simulation, TraceEvent | None], None]] = []
        self.events_processed = 0

    # -- registration -----------------------------------------------------

    def store_for(self, site_id: SiteId) -> SiteStore:
        return self._stores.setdefault(site_id, SiteStore())

    def add_site(self, site: Site) -> None:
        self.sites[site.site_id] = site

    def runtime_for(self, site_id: SiteId) -> Runtime:
        return Runtime(self, site_id)

    # -- scheduling --------------------------------------------------------

    def _push(self, at: float, item: object) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, item))

    def emit(self, site: SiteId, kind: TraceKind, data: dict) -> TraceEvent:
        self._seq += 1
        event = TraceEvent(self.now, self._seq, site, kind, data)
        self.trace.append(event)
        return event

    def post_send(self, src: SiteId, dst: SiteId, msg: Message) -> None:
        if dst not in self.sites:
            self.emit(src, TraceKind.DROP, {"to": dst, "msg": msg.describe(),
                                            "level": msg.level, "reason": "unknown_destination"})
            return
        lost, delay = self.links.sample(src, dst, self.rng)
        if lost:
            self.emit(src, TraceKind.DROP, {"to": dst, "msg": msg.describe(),
                                            "level": msg.level, "reason": "loss"})
            return
        self.emit(src, TraceKind.SEND, {"to": dst, "msg": msg.describe(),
                                        "level": msg.level, "delay": delay})
        self._push(self.now + delay, _Deliver(src, dst, msg))

    def set_timer(self, site: SiteId, key: tuple, delay_ms: float) -> None:
        slot = (site, key)
        gen = self._timer_gen.get(slot, 0) + 1
        self._timer_gen[slot] = gen
        self._timer_armed[slot] = gen
        self._push(self.now + delay_ms, _TimerFire(site, key, gen))

    def cancel_timer(self, site: SiteId, key: tuple) -> None:
        slot = (site, key)
        self._timer_gen[slot] = self._timer_gen.get(slot, 0) + 1
        self._timer_armed.pop(slot, None)

    def schedule_crash(self, at: float, site: SiteId) -> None:
        self._push(at, _Crash(site))

    def schedule_recover(self, at: float, site: SiteId) -> None:
        self._push(at, _Recover(site))

    def at(self, time: float, label: str, fn: Callable[[], None]) -> None:
        self._push(time, _Action(label, fn))

    # -- execution ---------------------------------------------------------

    def _void_timers(self, site: SiteId) -> None:
        for slot in [s for s in self._timer_armed if s[0] == site]:
            self._timer_gen[slot] = self._timer_gen.get(slot, 0) + 1
            del self._timer_armed[slot]

    def _dispatch(self, item: object) -> None:
        if isinstance(item, _Deliver):
            if item.dst in self.down:
                self.emit(item.dst, TraceKind.DROP,
                          {"from": item.sender, "msg": item.msg.describe(),
                           "level": item.msg.level, "reason": "site_down"})
                return
            self.emit(item.dst, TraceKind.DELIVER,
                      {"from": item.sender, "msg": item.msg.describe(),
                       "level": item.msg.level})
            self.sites[item.dst].on_message(item.sender, item.msg)
        elif isinstance(item, _TimerFire):
            slot = (item.site, item.key)
            if self._timer_armed.get(slot) != item.generation:
                return  # logically cancelled
            del self._timer_armed[slot]
            if item.site in self.down:
                return
            self.emit(item.site, TraceKind.TIMER_FIRE,
                      {"timer": "/".join(str(k) for k in item.key)})
            self.sites[item.site].on_timer(item.key)
        elif isinstance(item, _Crash):
            if item.site in self.down:
                return
            self.down.add(item.site)
            self._void_timers(item.site)
            self.emit(item.site, TraceKind.CRASH, {})
        elif isinstance(item, _Recover):
            if item.site not in self.down:
                return
            self.down.discard(item.site)
            self.emit(item.site, TraceKind.RECOVER, {})
            self.sites[item.site].on_recover()
        elif isinstance(item, _Action):
            item.fn()
        else:  # pragma: no cover
            raise TypeError(f"unknown event {item!r}")

    def start(self) -> None:
        for site_id in sorted(self.sites):
            self.sites[site_id].on_start()

    def run_until(
        self,
        condition: Optional[Callable[["Simulation"], bool]] = None,
        time_limit: Optional[float] = None,
        max_events: int = 5_000_000,
    ) -> list[TraceEvent]:
        """Pop and dispatch events in order until the predicate holds, time
        runs out, or the queue drains.  Returns the full trace so far."""
        while self._queue:
            at, _, item = self._queue[0]
            if time_limit is not None and at > time_limit:
                self.now = time_limit
                break
            heapq.heappop(self._queue)
            self.now = at
            self.events_processed += 1
            if self.events_processed > max_events:
                raise SimBudgetExceeded(max_events, self.trace)
            self._dispatch(item)
            for hook in self.post_event_hooks:
                hook(self, self.trace[-1] if self.trace else None)
            if condition is not None and condition(self):
                break
        return self.trace
