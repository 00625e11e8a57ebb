"""Deterministic discrete-event network for n engines.

Events are processed in strict ``(deliver_tick, seq_no)`` order. Every
scheduled message draws its link delay from SplitMix64, so a run is a pure
function of its ``ScenarioConfig``.

Nodes have a finite processing rate (``node_capacity`` peer messages per
tick). Peer messages queue FIFO at the receiver once that budget is used;
client requests and timer signals are not rate-limited. Network latency
(``arr - sent`` in the trace) always stays within ``max_delay`` for honest
links; queueing shows up as processing ticks later than ``arr``.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Tuple

from .codec import KeyedHashScheme, KeyPair, SignatureScheme, hash_bytes
from .config import ByzantineMode, ConfigInvalid, ScenarioConfig, TargetPolicy
from .consensus import (
    CLIENT,
    DuplicateMessage,
    Engine,
    EngineConfig,
    Send,
    build_preprepare,
)
from .ledger import ClientMessage, Coordinate, State
from .messages import ClientReply, Commit, Prepare, PrePrepare, PullRequest, PullResponse, signed
from .trace import CLIENT_NODE, TraceEvent

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return splitmix64_mix(self.state)


@dataclass(frozen=True)
class DelayModel:
    min_delay: int
    max_delay: int
    rng_seed: int

    def draw(self, seq_no: int) -> int:
        """Delay for the message scheduled with ``seq_no``.

        Equals output number ``seq_no`` (0-based) of a SplitMix64 stream
        seeded with ``rng_seed``, so any event's delay is computable alone.
        """
        z = splitmix64_mix(self.rng_seed + (seq_no + 1) * GOLDEN)
        return self.min_delay + z % (self.max_delay - self.min_delay + 1)


@dataclass(frozen=True)
class AdversarySpec:
    byzantine_nodes: FrozenSet[int]
    mode: ByzantineMode


@dataclass
class AdversaryContext:
    """What a Byzantine node needs to forge its own traffic."""

    n: int
    keys: Dict[int, KeyPair]
    scheme: SignatureScheme
    max_delay: int
    # equivocation: original state digest -> alternate PrePrepare
    forks: Dict[bytes, PrePrepare] = field(default_factory=dict)

    def peers(self, node: int) -> List[int]:
        return [p for p in range(self.n) if p != node]


def _flip(digest: bytes) -> bytes:
    return hash_bytes(b"equivocate" + digest)


def _fork_preprepare(ctx: AdversaryContext, node: int, pp: PrePrepare) -> PrePrepare:
    state = pp.state
    if state.digest in ctx.forks:
        return ctx.forks[state.digest]
    parent_seq, parent_digest = state.parent_seq, state.parent_digest
    for alt in ctx.forks.values():
        if alt.state.coord == Coordinate(node, parent_seq):
            parent_digest = alt.state.digest
            break
    msg = ClientMessage(pp.msg.client, pp.msg.lamport_ts, pp.msg.payload + b"/fork")
    alt = build_preprepare(
        ctx.keys[node], ctx.scheme, msg, state.coord.seq,
        parent_seq, parent_digest, state.snapshot, state.supersedes,
    )
    ctx.forks[state.digest] = alt
    return alt


def apply_adversary(spec: AdversarySpec, node: int, send: Send, ctx: AdversaryContext) -> List[Send]:
    """Rewrite one outbound Send of Byzantine ``node``. Client replies pass unaltered."""
    if node not in spec.byzantine_nodes:
        return [send]
    mode = spec.mode
    msg = send.msg
    if mode is ByzantineMode.SILENT:
        return []
    if isinstance(msg, ClientReply):
        return [send]
    if mode is ByzantineMode.MAX_DELAY:
        return [Send(send.dst, msg, ctx.max_delay)]
    if mode is ByzantineMode.REVERSE_REFS:
        if isinstance(msg, PrePrepare):
            refs = tuple(r.reversed() for r in msg.refs)
            forged = signed(PrePrepare(msg.msg, msg.sn, msg.state, msg.proof, refs, msg.sender),
                            ctx.keys[node], ctx.scheme)
            return [Send(send.dst, forged, send.delay)]
        return [send]
    if mode is ByzantineMode.EQUIVOCATE:
        if isinstance(msg, PrePrepare):
            altered = _fork_preprepare(ctx, node, msg)
        elif isinstance(msg, Prepare):  # Commit included
            if msg.coord.chain == node and msg.digest in ctx.forks:
                digest = ctx.forks[msg.digest].state.digest
            else:
                digest = _flip(msg.digest)
            altered = signed(type(msg)(msg.coord, digest, msg.sender), ctx.keys[node], ctx.scheme)
        else:
            return [send]
        dsts = ctx.peers(node) if send.dst is None else [send.dst]
        return [Send(d, msg if d % 2 == 0 else altered, send.delay) for d in dsts]
    return [send]


def inject_clients(
    rate: Fraction,
    duration: int,
    n: int,
    policy: TargetPolicy = TargetPolicy.ROUND_ROBIN,
    seed: int = 0,
) -> List[Tuple[int, ClientMessage, int]]:
    """(tick, message, target node) for every client submission.

    ``floor(rate * duration)`` messages; message k is submitted at tick
    ``floor(k / rate)``.
    """
    rate = Fraction(rate)
    if rate < 0:
        raise ValueError("rate must be non-negative")
    count = int(rate * duration)
    rng = SplitMix64(seed ^ 0x5EED)
    out = []
    for k in range(count):
        tick = int(k / rate)
        msg = ClientMessage(0, k, b"tx-%d-%d" % (seed, k))
        target = k % n if policy is TargetPolicy.ROUND_ROBIN else rng.next() % n
        out.append((tick, msg, target))
    return out


# -- event loop -------------------------------------------------------------------

@dataclass(frozen=True)
class TickSignal:
    pass


@dataclass(frozen=True)
class Watchdog:
    msg: ClientMessage
    target: int
    attempt: int


@dataclass
class SimEvent:
    deliver_tick: int
    seq_no: int
    dst: int
    payload: object
    src: int = CLIENT_NODE
    sent: int = 0
    arrived: int = 0
    bid: int = -1
    reserved: bool = False
    attempt: int = 0
    # trace tag and fields of the payload, shared by every copy of a broadcast
    desc: Tuple[str, Tuple[Tuple[str, str], ...]] = ("", ())


@dataclass
class SimResult:
    config: ScenarioConfig
    events: List[TraceEvent]
    engines: List[Engine]
    replies: Dict[bytes, ClientReply]
    injected: List[Tuple[int, ClientMessage, int]]


def _tag(payload) -> str:
    if isinstance(payload, PrePrepare):
        return "PREPREPARE"
    if isinstance(payload, Commit):
        return "COMMIT"
    if isinstance(payload, Prepare):
        return "PREPARE"
    if isinstance(payload, PullRequest):
        return "PULLREQ"
    if isinstance(payload, PullResponse):
        return "PULLRESP"
    raise TypeError(type(payload).__name__)


def _describe(payload) -> Tuple[Tuple[str, str], ...]:
    if isinstance(payload, PrePrepare):
        st: State = payload.state
        return (("coord", str(st.coord)), ("digest", st.digest.hex()), ("msg", payload.msg.id.hex()))
    if isinstance(payload, Prepare):
        return (("coord", str(payload.coord)), ("digest", payload.digest.hex()))
    return ()


class Simulator:
    # peer messages each node may process per tick is config.node_capacity

    def __init__(self, config: ScenarioConfig, scheme: Optional[SignatureScheme] = None):
        self.config = config
        self.scheme = scheme or KeyedHashScheme()
        self.keys = {i: self.scheme.keygen(config.seed, i) for i in range(config.n)}
        publics = {i: k.public for i, k in self.keys.items()}
        self.engines = [
            Engine(EngineConfig(
                config.n, config.f, i, self.keys[i], publics,
                retry_bound=config.retry_bound, timeout_ticks=config.timeout_ticks,
                scheme=self.scheme,
            ))
            for i in range(config.n)
        ]
        self.delays = DelayModel(config.min_delay, config.max_delay, config.seed)
        self.spec = AdversarySpec(config.byzantine_nodes, config.byzantine_mode)
        self.ctx = AdversaryContext(config.n, self.keys, self.scheme, config.max_delay)
        # heap of (deliver_tick, seq_no, event)
        self.queue: List[Tuple[int, int, SimEvent]] = []
        self.seq_no = 0
        self.next_bid = 0
        self.next_tick: Dict[int, Optional[int]] = {i: None for i in range(config.n)}
        self.slot: Dict[int, Tuple[int, int]] = {i: (0, 0) for i in range(config.n)}
        self.replies: Dict[bytes, ClientReply] = {}
        self.events: List[TraceEvent] = []
        self.injected: List[Tuple[int, ClientMessage, int]] = []

    def _push(self, tick: int, dst: int, payload, **kw) -> SimEvent:
        self.seq_no += 1
        ev = SimEvent(tick, self.seq_no, dst, payload, **kw)
        heapq.heappush(self.queue, (tick, self.seq_no, ev))
        return ev

    def _watchdog_delay(self) -> int:
        return self.config.timeout_ticks + 2 * self.config.max_delay + 1

    # -- scheduling of engine output --

    def _dispatch(self, node: int, now: int, sends: List[Send], fields: list) -> None:
        for send in sends:
            for out in apply_adversary(self.spec, node, send, self.ctx):
                if out.dst == CLIENT:
                    reply = out.msg
                    coord = "-" if reply.coord is None else str(reply.coord)
                    fields.append(("reply", f"{reply.msg_id.hex()}:{reply.outcome.name.lower()}:{coord}"))
                    self.replies.setdefault(reply.msg_id, reply)
                    continue
                bid = self.next_bid
                self.next_bid += 1
                desc = (_tag(out.msg), _describe(out.msg))
                dsts = [p for p in range(self.config.n) if p != node] if out.dst is None else [out.dst]
                for d in dsts:
                    # the seq_no the event is about to receive keys its delay
                    delay = out.delay if out.delay is not None else self.delays.draw(self.seq_no + 1)
                    self._push(now + delay, d, out.msg, src=node, sent=now, arrived=now + delay, bid=bid,
                               desc=desc)
        engine = self.engines[node]
        deadline = engine.next_deadline()
        if deadline is not None:
            deadline = max(deadline, now + 1)
            current = self.next_tick[node]
            if current is None or current <= now or deadline < current:
                self.next_tick[node] = deadline
                self._push(deadline, node, TickSignal())

    def _notes(self, engine: Engine, fields: list) -> None:
        for key, value in engine.take_notes():
            if key != "reply":
                fields.append((key, value) if value else (key, "-"))

    def _reserve(self, ev: SimEvent) -> Optional[int]:
        """Slot tick for a peer message, None if it runs now."""
        cap = self.config.node_capacity
        if cap <= 0 or ev.reserved:
            return None
        tick, used = self.slot[ev.dst]
        if tick < ev.deliver_tick:
            tick, used = ev.deliver_tick, 0
        if used >= cap:
            tick, used = tick + 1, 0
        self.slot[ev.dst] = (tick, used + 1)
        return None if tick == ev.deliver_tick else tick

    # -- main loop --

    def run(self) -> SimResult:
        cfg = self.config
        self.events.append(TraceEvent(0, CLIENT_NODE, "START", 0, tuple(cfg.items())))
        self.injected = inject_clients(cfg.arrival_rate, cfg.duration_ticks, cfg.n, cfg.target_policy, cfg.seed)
        for tick, msg, target in self.injected:
            self._push(tick, target, msg)
        while self.queue:
            self._step(heapq.heappop(self.queue)[2])
        end = self.events[-1].tick
        for engine in self.engines:
            local, remote = engine.ledger.disk_usage()
            self.seq_no += 1
            self.events.append(TraceEvent(end, engine.id, "FINAL", self.seq_no, (
                ("local_bytes", str(local)), ("remote_bytes", str(remote)),
                ("states", str(len(engine.ledger.chain))),
            )))
        return SimResult(cfg, self.events, self.engines, self.replies, self.injected)

    def _step(self, ev: SimEvent) -> None:
        now = ev.deliver_tick
        payload = ev.payload
        if isinstance(payload, Watchdog):
            self._watchdog(ev)
            return
        node = ev.dst
        engine = self.engines[node]
        fields: list = []
        if isinstance(payload, TickSignal):
            if self.next_tick[node] != now:
                return  # superseded by an earlier signal
            self.next_tick[node] = None
            sends = engine.on_tick(now)
            tag = "TICK"
        elif isinstance(payload, ClientMessage):
            tag = "CLIENT"
            fields += [("msg", payload.id.hex()), ("lamport", str(payload.lamport_ts))]
            try:
                sends = engine.on_client_request(payload, now)
            except DuplicateMessage:
                sends = []
            self._push(now + self._watchdog_delay(), CLIENT_NODE, Watchdog(payload, node, ev.attempt))
        else:
            later = self._reserve(ev)
            if later is not None:
                self._push(later, node, payload, src=ev.src, sent=ev.sent, arrived=ev.arrived,
                           bid=ev.bid, reserved=True, desc=ev.desc)
                return
            tag, described = ev.desc
            fields += [("from", str(ev.src)), ("sent", str(ev.sent)), ("arr", str(ev.arrived)),
                       ("bid", str(ev.bid))]
            fields += described
            sends = engine.handle(payload, now)
        self._notes(engine, fields)
        self._dispatch(node, now, sends, fields)
        self.events.append(TraceEvent(now, node, tag, ev.seq_no, tuple(fields)))

    def _watchdog(self, ev: SimEvent) -> None:
        wd: Watchdog = ev.payload
        if wd.msg.id in self.replies or wd.attempt + 1 >= self.config.n:
            return
        target = (wd.target + 1) % self.config.n
        self.events.append(TraceEvent(ev.deliver_tick, CLIENT_NODE, "WATCHDOG", ev.seq_no, (
            ("msg", wd.msg.id.hex()), ("target", str(target)),
        )))
        self._push(ev.deliver_tick, target, wd.msg, attempt=wd.attempt + 1)


def run(config: ScenarioConfig, scheme: Optional[SignatureScheme] = None) -> SimResult:
    if not isinstance(config, ScenarioConfig):
        raise ConfigInvalid("run() needs a ScenarioConfig")
    return Simulator(config, scheme).run()
