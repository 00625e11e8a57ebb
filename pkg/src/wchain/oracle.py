"""Independent checkers for relative persistence, liveness and origin order.

Inputs are the trace and the persisted ledgers only; nothing here calls into
the consensus engine. Orders are recomputed by brute force over pairs.

A node *accepts* ``(coordinate, digest)`` when its trace lines show it
emitting a Commit for it or marking it committed, or its ledger file holds
the state with status COMMITTED.
"""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .ledger import Ledger, StateStatus
from .trace import TraceEvent, start_config

Slot = Tuple[int, int]  # (chain, seq)
TERMINAL = ("committed", "failure", "timeout")


class Property(Enum):
    RELATIVE_PERSISTENCE = "RelativePersistence"
    LIVENESS = "Liveness"
    ORIGIN_SEQUENCE = "OriginSequence"


@dataclass(frozen=True)
class Counterexample:
    kind: str
    nodes: Tuple[int, ...] = ()
    chain: int = -1
    items: Tuple[str, ...] = ()
    tick: int = -1

    def fields(self) -> List[str]:
        return [
            self.kind,
            ",".join(str(n) for n in self.nodes) or "-",
            str(self.chain),
            ",".join(self.items) or "-",
            str(self.tick),
        ]


@dataclass(frozen=True)
class Verdict:
    property: Property
    holds: bool
    counterexample: Optional[Counterexample] = None
    scope: str = "all"

    def line(self) -> str:
        cx = self.counterexample.fields() if self.counterexample else ["-"] * 5
        return "\t".join([self.property.value, self.scope, "true" if self.holds else "false", *cx])


# -- views ----------------------------------------------------------------------------

def _slot(text: str) -> Tuple[Slot, str]:
    chain, seq_no, digest = text.split(":")
    return (int(chain), int(seq_no)), digest


@dataclass
class NodeView:
    """What one node accepted: slot -> {digest: first tick}."""

    node: int
    accepted: Dict[Slot, Dict[str, int]] = field(default_factory=lambda: defaultdict(dict))
    retired: Set[Slot] = field(default_factory=set)

    def accept(self, slot: Slot, digest: str, tick: int) -> None:
        seen = self.accepted[slot]
        if digest not in seen or tick < seen[digest]:
            seen[digest] = tick

    def chain_digests(self, chain: int) -> Dict[str, int]:
        """digest -> seq for the chain's accepted states."""
        return {d: s for (c, s), ds in self.accepted.items() if c == chain for d in ds}


def honest_nodes(events: Sequence[TraceEvent]) -> List[int]:
    cfg = start_config(events)
    n = int(cfg["n"])
    byz = {int(x) for x in cfg.get("byzantine_nodes", "").split(",") if x}
    return [i for i in range(n) if i not in byz]


def build_views(events: Sequence[TraceEvent], ledgers: Optional[Mapping[int, Ledger]] = None) -> Dict[int, NodeView]:
    views: Dict[int, NodeView] = {}
    for node in honest_nodes(events):
        views[node] = NodeView(node)
    for ev in events:
        view = views.get(ev.node)
        if view is None:
            continue
        for key, value in ev.fields:
            if key in ("commit", "committed"):
                slot, digest = _slot(value)
                view.accept(slot, digest, ev.tick)
            elif key == "supersede":
                old = value.split(">")[0]
                c, s = old.split(":")
                view.retired.add((int(c), int(s)))
            elif key in ("retire", "aborted"):
                c, s = value.split(":")
                view.retired.add((int(c), int(s)))
    if ledgers:
        add_ledgers(views, ledgers, events[-1].tick if events else 0)
    return views


def copy_views(views: Mapping[int, NodeView]) -> Dict[int, NodeView]:
    out = {}
    for node, view in views.items():
        fresh = NodeView(node)
        for slot, digests in view.accepted.items():
            fresh.accepted[slot] = dict(digests)
        fresh.retired = set(view.retired)
        out[node] = fresh
    return out


def add_ledgers(views: Dict[int, NodeView], ledgers: Mapping[int, Ledger], last_tick: int) -> None:
    """Ledger contents count as accepted at the end of the trace."""
    for node, ledger in ledgers.items():
        view = views.get(node)
        if view is None:
            continue
        states = list(ledger.chain) + [s for s in ledger.remote.values() if s is not None]
        for st in states:
            status = ledger.status[st.coord]
            slot = (st.coord.chain, st.coord.seq)
            if status == StateStatus.COMMITTED:
                view.accept(slot, st.digest.hex(), last_tick)
            elif status in (StateStatus.SUPERSEDED, StateStatus.ABORTED):
                view.retired.add(slot)


# -- relative persistence -------------------------------------------------------------

def _pair_violation(a: NodeView, b: NodeView, chains: Iterable[int]) -> Optional[Counterexample]:
    shared = sorted(set(a.accepted) & set(b.accepted))
    for chain in chains:
        # two decisions on the same coordinate
        for slot in shared:
            if slot[0] != chain:
                continue
            da, db = set(a.accepted[slot]), set(b.accepted[slot])
            if da != db and not (da & db):
                tick = max(min(a.accepted[slot].values()), min(b.accepted[slot].values()))
                return Counterexample(
                    "coordinate", (a.node, b.node), chain,
                    (f"{chain}:{slot[1]}", sorted(da)[0], sorted(db)[0]), tick,
                )
        sa, sb = a.chain_digests(chain), b.chain_digests(chain)
        common = sorted(set(sa) & set(sb))
        for x, y in combinations(common, 2):
            before_a = sa[x] < sa[y]
            before_b = sb[x] < sb[y]
            if before_a != before_b:
                return Counterexample(
                    "order", (a.node, b.node), chain,
                    (x, y, f"{sa[x]}<{sa[y]}", f"{sb[x]}<{sb[y]}"), -1,
                )
    return None


def check_relative_persistence(
    ledgers: Optional[Mapping[int, Ledger]],
    events: Sequence[TraceEvent],
    views: Optional[Dict[int, NodeView]] = None,
) -> Verdict:
    if views is None:
        views = build_views(events, ledgers)
    n = int(start_config(events)["n"])
    for u, v in combinations(sorted(views), 2):
        cx = _pair_violation(views[u], views[v], range(n))
        if cx is not None:
            return Verdict(Property.RELATIVE_PERSISTENCE, False, cx)
    return Verdict(Property.RELATIVE_PERSISTENCE, True)


# -- liveness -------------------------------------------------------------------------------

def liveness_window(cfg: Mapping[str, str]) -> int:
    return 2 * int(cfg["max_delay"]) * (int(cfg["retry_bound"]) + 2)


def check_liveness(
    events: Sequence[TraceEvent],
    config: Optional[Mapping[str, str]] = None,
    views: Optional[Dict[int, NodeView]] = None,
) -> Verdict:
    """Every injected message gets a terminal reply, and every honest-origin
    relationship one honest node commits is acknowledged by the others in time.

    ``views`` must come from the trace alone: acknowledgement times are trace ticks.
    """
    cfg = dict(config) if config is not None else start_config(events)
    injected: Dict[str, int] = {}
    replied: Set[str] = set()
    for ev in events:
        if ev.tag == "CLIENT":
            injected.setdefault(ev.get("msg"), ev.tick)
        for value in ev.all("reply"):
            msg_id, outcome = value.split(":")[:2]
            if outcome in TERMINAL:
                replied.add(msg_id)
    for msg_id, tick in sorted(injected.items(), key=lambda kv: (kv[1], kv[0])):
        if msg_id not in replied:
            return Verdict(Property.LIVENESS, False, Counterexample("no_reply", (), -1, (msg_id,), tick))

    if views is None:
        views = build_views(events)
    window = liveness_window(cfg)
    for ev in events:
        u = ev.node
        if u not in views:
            continue
        for value in ev.all("committed"):
            slot, digest = _slot(value)
            if slot[0] not in views:
                continue  # Byzantine origin: not a correct relationship
            for v in sorted(views):
                if v == u or slot in views[v].retired:
                    continue
                acked = views[v].accepted.get(slot, {}).get(digest)
                if acked is None or acked > ev.tick + window:
                    return Verdict(Property.LIVENESS, False, Counterexample(
                        "not_acknowledged", (u, v), slot[0], (value,), ev.tick,
                    ))
    return Verdict(Property.LIVENESS, True)


# -- origin sequence ---------------------------------------------------------------------------

def origin_sequences(views: Mapping[int, NodeView], origin: int) -> Dict[int, List[Tuple[int, str]]]:
    retired = set().union(*(v.retired for v in views.values())) if views else set()
    out = {}
    for node, view in views.items():
        seqs = []
        for (chain, s), digests in view.accepted.items():
            if chain == origin and (chain, s) not in retired:
                seqs.extend((s, d) for d in digests)
        out[node] = sorted(seqs)
    return out


def check_origin_sequence(
    ledgers: Optional[Mapping[int, Ledger]],
    events: Sequence[TraceEvent],
    origin: int,
    require_complete: bool = True,
    views: Optional[Dict[int, NodeView]] = None,
) -> Verdict:
    """Each honest node's view of ``origin``'s chain must agree.

    With ``require_complete`` the subsequences must be identical; without,
    nodes may have seen different subsets, but at most one digest per
    sequence number is accepted anywhere.
    """
    if views is None:
        views = build_views(events, ledgers)
    seqs = origin_sequences(views, origin)
    scope = f"origin={origin}"
    nodes = sorted(seqs)
    for u, v in combinations(nodes, 2):
        a, b = seqs[u], seqs[v]
        if require_complete and a != b:
            diff = sorted(set(a) ^ set(b))[0]
            return Verdict(Property.ORIGIN_SEQUENCE, False, Counterexample(
                "sequence", (u, v), origin, (f"{origin}:{diff[0]}", diff[1]), -1,
            ), scope)
        da, db = dict(a), dict(b)
        for s in sorted(set(da) & set(db)):
            if da[s] != db[s]:
                return Verdict(Property.ORIGIN_SEQUENCE, False, Counterexample(
                    "sequence", (u, v), origin, (f"{origin}:{s}", da[s], db[s]), -1,
                ), scope)
    for node in nodes:
        per_seq = defaultdict(set)
        for s, d in seqs[node]:
            per_seq[s].add(d)
        for s, ds in sorted(per_seq.items()):
            if len(ds) > 1:
                return Verdict(Property.ORIGIN_SEQUENCE, False, Counterexample(
                    "sequence", (node,), origin, (f"{origin}:{s}", *sorted(ds)), -1,
                ), scope)
    return Verdict(Property.ORIGIN_SEQUENCE, True, None, scope)


# -- re-verification -----------------------------------------------------------------------------

def recheck(cx: Counterexample, events: Sequence[TraceEvent], ledgers: Optional[Mapping[int, Ledger]] = None) -> bool:
    """Confirm a counterexample directly against the raw inputs."""
    if cx.kind == "no_reply":
        msg_id = cx.items[0]
        injected = any(ev.tag == "CLIENT" and ev.get("msg") == msg_id for ev in events)
        replied = any(
            v.split(":")[0] == msg_id and v.split(":")[1] in TERMINAL
            for ev in events for v in ev.all("reply")
        )
        return injected and not replied
    views = build_views(events, ledgers)
    if cx.kind == "not_acknowledged":
        u, v = cx.nodes
        slot, digest = _slot(cx.items[0])
        committed = any(ev.node == u and cx.items[0] in ev.all("committed") for ev in events)
        window = liveness_window(start_config(events))
        acked = views[v].accepted.get(slot, {}).get(digest)
        return committed and (acked is None or acked > cx.tick + window)
    if cx.kind == "coordinate":
        u, v = cx.nodes
        chain, s = (int(x) for x in cx.items[0].split(":"))
        return (cx.items[1] in views[u].accepted.get((chain, s), {})
                and cx.items[2] in views[v].accepted.get((chain, s), {})
                and cx.items[1] != cx.items[2])
    if cx.kind == "order":
        u, v = cx.nodes
        x, y = cx.items[:2]
        sa, sb = views[u].chain_digests(cx.chain), views[v].chain_digests(cx.chain)
        if not {x, y} <= set(sa) & set(sb):
            return False
        return (sa[x] < sa[y]) != (sb[x] < sb[y])
    if cx.kind == "sequence":
        chain, s = (int(x) for x in cx.items[0].split(":"))
        seqs = origin_sequences(views, chain)
        seen = set()
        for node in cx.nodes:
            seen |= {d for ss, d in seqs.get(node, []) if ss == s}
        if len(cx.nodes) == 1:
            return len(seen) > 1
        a, b = (set(seqs.get(n, [])) for n in cx.nodes)
        if len(cx.items) == 2:
            # completeness: the named entry is held by exactly one of the two
            return (s, cx.items[1]) in a ^ b
        da, db = cx.items[1:3]
        return da != db and (s, da) in a and (s, db) in b
    return False


# -- reports -----------------------------------------------------------------------------------------

VERDICT_HEADER = "property\tscope\tholds\tkind\tnodes\tchain\titems\ttick"


def check_all(
    events: Sequence[TraceEvent],
    ledgers: Optional[Mapping[int, Ledger]] = None,
    require_complete: Optional[bool] = None,
) -> List[Verdict]:
    cfg = start_config(events)
    n = int(cfg["n"])
    if require_complete is None:
        require_complete = cfg.get("byzantine_mode", "none") != "equivocate"
    trace_views = build_views(events)
    views = trace_views
    if ledgers:
        views = copy_views(trace_views)
        add_ledgers(views, ledgers, events[-1].tick)
    out = [
        check_relative_persistence(ledgers, events, views),
        check_liveness(events, cfg, trace_views),
    ]
    honest = honest_nodes(events)
    for origin in range(n):
        # a Byzantine origin can only be held to consistency, not completeness
        complete = require_complete and origin in honest
        out.append(check_origin_sequence(ledgers, events, origin, complete, views))
    return out


def format_verdicts(verdicts: Iterable[Verdict]) -> str:
    return VERDICT_HEADER + "\n" + "".join(v.line() + "\n" for v in verdicts)


def load_ledgers(directory, n: int) -> Dict[int, Ledger]:
    out = {}
    for node in range(n):
        path = os.path.join(directory, f"node{node}.wledger")
        if os.path.exists(path):
            out[node] = Ledger.load(path)
    return out


__all__ = [
    "Property", "Counterexample", "Verdict", "NodeView", "build_views", "honest_nodes",
    "check_relative_persistence", "check_liveness", "check_origin_sequence", "check_all",
    "recheck", "format_verdicts", "load_ledgers", "VERDICT_HEADER",
]
