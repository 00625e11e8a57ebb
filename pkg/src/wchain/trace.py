"""WCTRACE text format.

::

    WCTRACE 1
    <tick>\t<node>\t<TAG>\t<seq_no>\t<key>=<value>\t...

One line per processed simulator event, in processing order. Keys may
repeat (an event can emit several things). The client is node ``-1``.
The first event is ``START`` at tick 0 and carries the scenario config.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Tuple

HEADER = "WCTRACE 1"
CLIENT_NODE = -1


class MalformedTrace(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    node: int
    tag: str
    seq_no: int
    fields: Tuple[Tuple[str, str], ...] = ()

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def all(self, key: str) -> List[str]:
        return [v for k, v in self.fields if k == key]

    def format(self) -> str:
        parts = [str(self.tick), str(self.node), self.tag, str(self.seq_no)]
        parts.extend(f"{k}={v}" for k, v in self.fields)
        return "\t".join(parts)


def _check_token(text: str) -> None:
    if any(c in text for c in "\t\n\r="):
        raise ValueError(f"trace token contains a separator: {text!r}")


def make_event(tick: int, node: int, tag: str, seq_no: int, fields: Iterable[Tuple[str, str]] = ()) -> TraceEvent:
    fields = tuple((str(k), str(v)) for k, v in fields)
    for k, v in fields:
        _check_token(k)
        if any(c in v for c in "\t\n\r"):
            raise ValueError(f"trace value contains a separator: {v!r}")
    return TraceEvent(tick, node, tag, seq_no, fields)


def format_trace(events: Iterable[TraceEvent]) -> str:
    lines = [HEADER]
    lines.extend(e.format() for e in events)
    return "\n".join(lines) + "\n"


def parse_line(line: str, lineno: int = 0) -> TraceEvent:
    parts = line.split("\t")
    if len(parts) < 4:
        raise MalformedTrace(f"line {lineno}: expected at least 4 fields")
    try:
        tick, node, seq_no = int(parts[0]), int(parts[1]), int(parts[3])
    except ValueError:
        raise MalformedTrace(f"line {lineno}: bad integer field") from None
    if tick < 0 or seq_no < 0 or not parts[2]:
        raise MalformedTrace(f"line {lineno}: bad event header")
    fields = []
    for item in parts[4:]:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise MalformedTrace(f"line {lineno}: bad field {item!r}")
        fields.append((key, value))
    return TraceEvent(tick, node, parts[2], seq_no, tuple(fields))


def iter_trace(text: str) -> Iterator[TraceEvent]:
    """Parse and validate ordering: ticks nondecreasing, seq_no increasing within a tick."""
    lines = text.split("\n")
    if not lines or lines[0].strip() != HEADER:
        raise MalformedTrace("missing WCTRACE header")
    last = (-1, -1)
    seen = set()
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        ev = parse_line(line, i)
        if (ev.tick, ev.seq_no) <= last:
            raise MalformedTrace(f"line {i}: events out of order")
        if ev.seq_no in seen:
            raise MalformedTrace(f"line {i}: duplicate seq_no {ev.seq_no}")
        seen.add(ev.seq_no)
        last = (ev.tick, ev.seq_no)
        yield ev


def parse_trace(text: str) -> List[TraceEvent]:
    events = list(iter_trace(text))
    if not events or events[0].tag != "START":
        raise MalformedTrace("trace must begin with a START event")
    return events


def read_trace(path) -> List[TraceEvent]:
    with open(path, "r", encoding="ascii") as fh:
        return parse_trace(fh.read())


def start_config(events: List[TraceEvent]) -> dict:
    """The key=value pairs of the START event."""
    return dict(events[0].fields)
