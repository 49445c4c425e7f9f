"""Append-only simulation trace: the sole input of the checker and metrics.

Events are totally ordered by (time, seq) where seq is assigned from the
run's global counter at emission.  The export format is one JSON object
per line with sorted keys, so identical runs serialize byte-identically.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import IO, Iterable


class TraceKind(enum.Enum):
    SEND = "send"
    DROP = "drop"
    DELIVER = "deliver"
    TIMER_FIRE = "timer_fire"
    ROLE_CHANGE = "role_change"
    INSERT = "insert"
    OVERWRITE = "overwrite"
    COMMIT = "commit"
    CONFIG_CHANGE = "config_change"
    CRASH = "crash"
    RECOVER = "recover"
    PROPOSE_START = "propose_start"
    COMMIT_NOTIFIED = "commit_notified"


@dataclass(frozen=True, slots=True)
class TraceEvent:
    time: float
    seq: int
    site: str
    kind: TraceKind
    data: dict

    def to_json(self) -> str:
        record = {
            "time": self.time,
            "seq": self.seq,
            "site": self.site,
            "kind": self.kind.value,
            **self.data,
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":"))


def parse_line(line: str) -> TraceEvent:
    record = json.loads(line)
    return TraceEvent(
        time=record.pop("time"),
        seq=record.pop("seq"),
        site=record.pop("site"),
        kind=TraceKind(record.pop("kind")),
        data=record,
    )


def write_trace(events: Iterable[TraceEvent], fp: IO[str]) -> None:
    for event in events:
        fp.write(event.to_json())
        fp.write("\n")


def read_trace(fp: IO[str]) -> list[TraceEvent]:
    return [parse_line(line) for line in fp if line.strip()]


def trace_bytes(events: Iterable[TraceEvent]) -> bytes:
    """Canonical serialization used by the determinism contract."""
    return "".join(e.to_json() + "\n" for e in events).encode()
