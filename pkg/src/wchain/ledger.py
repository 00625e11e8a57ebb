"""Per-node ledger: own chain, latest remote states, message log.

A node's chain only ever grows. Retired states (superseded by a
re-attached copy, or aborted on timeout) keep their slot; "live" states
are the rest. Parent links always point at the previous live state.
"""

from __future__ import annotations

import bisect
import copy
import heapq
import os
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Set, Tuple

from .codec import (
    DIGEST_SIZE,
    DecodeError,
    Reader,
    Signature,
    Tag,
    blob,
    genesis_digest,
    hash_bytes,
    register_decoder,
    seq,
    u64,
)

MAGIC = b"WCHAIN01"


class LedgerError(Exception):
    pass


class SeqGap(LedgerError):
    pass


class ParentMismatch(LedgerError):
    pass


class UnknownCoordinate(LedgerError):
    pass


class IoFailure(LedgerError):
    pass


class CorruptFile(LedgerError):
    pass


def check_membership(n: int, f: int) -> None:
    if f < 1 or n != 3 * f + 1:
        raise ValueError(f"need n == 3f+1 with f >= 1, got n={n}, f={f}")


class Coordinate(NamedTuple):
    """(chain, seq): where a state sits. A tuple, so it hashes and sorts cheaply."""

    chain: int
    seq: int

    def __str__(self) -> str:
        return f"{self.chain}:{self.seq}"

    @staticmethod
    def parse(text: str) -> "Coordinate":
        chain, _, s = text.partition(":")
        return Coordinate(int(chain), int(s))


class StateStatus(IntEnum):
    PROVISIONAL = 0
    PREPARED = 1
    COMMITTED = 2
    SUPERSEDED = 3
    ABORTED = 4

    @property
    def live(self) -> bool:
        return self < StateStatus.SUPERSEDED

    @property
    def terminal(self) -> bool:
        return self >= StateStatus.COMMITTED


_LEGAL = {
    StateStatus.PROVISIONAL: {StateStatus.PREPARED, StateStatus.SUPERSEDED, StateStatus.ABORTED,
                              StateStatus.COMMITTED},
    StateStatus.PREPARED: {StateStatus.COMMITTED, StateStatus.SUPERSEDED, StateStatus.ABORTED},
}


class Order(Enum):
    BEFORE = "before"
    AFTER = "after"
    UNRELATED = "unrelated"


@dataclass(frozen=True)
class Reference:
    """Happens-before edge: the state at ``dst`` happens before ``src``."""

    src: Coordinate
    dst: Coordinate
    src_digest: bytes
    dst_digest: bytes

    def reversed(self) -> "Reference":
        return Reference(self.dst, self.src, self.dst_digest, self.src_digest)

    def encode(self) -> bytes:
        return (
            bytes([Tag.REFERENCE])
            + u64(self.src.chain) + u64(self.src.seq) + blob(self.src_digest)
            + u64(self.dst.chain) + u64(self.dst.seq) + blob(self.dst_digest)
        )

    @staticmethod
    def read(reader: Reader) -> "Reference":
        reader.tag(Tag.REFERENCE)
        src = Coordinate(reader.u64(), reader.u64())
        src_digest = reader.digest()
        dst = Coordinate(reader.u64(), reader.u64())
        return Reference(src, dst, src_digest, reader.digest())


@dataclass(frozen=True)
class ClientMessage:
    client: int
    lamport_ts: int
    payload: bytes
    id: bytes = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "id", hash_bytes(self.encode()))

    def encode(self) -> bytes:
        return bytes([Tag.CLIENT_MESSAGE]) + u64(self.client) + u64(self.lamport_ts) + blob(self.payload)

    @staticmethod
    def read(reader: Reader) -> "ClientMessage":
        reader.tag(Tag.CLIENT_MESSAGE)
        client = reader.u64()
        ts = reader.u64()
        return ClientMessage(client, ts, reader.blob())

    def order_key(self) -> Tuple[int, int, bytes]:
        return (self.lamport_ts, self.client, self.id)


@dataclass(frozen=True)
class SnapshotEntry:
    peer: int
    seq: int
    digest: bytes


@dataclass(frozen=True)
class State:
    """One block on one node's chain.

    ``digest`` hashes the unsigned body, so
    ``hash_bytes(state.encode()) == state.digest``.
    """

    coord: Coordinate
    merkle_root: bytes
    message_hash: bytes
    parent_seq: int
    parent_digest: bytes
    snapshot: Tuple[SnapshotEntry, ...]
    supersedes: Optional[Coordinate] = None
    signature: Signature = field(default=Signature(b"", 0), compare=False)
    body: bytes = field(init=False, repr=False, compare=False)
    digest: bytes = field(init=False, repr=False)

    def __post_init__(self):
        body = (
            bytes([Tag.STATE])
            + u64(self.coord.chain) + u64(self.coord.seq)
            + blob(self.merkle_root) + blob(self.message_hash)
            + u64(self.parent_seq) + blob(self.parent_digest)
            + seq(u64(e.peer) + u64(e.seq) + blob(e.digest) for e in self.snapshot)
            + seq([] if self.supersedes is None
                  else [u64(self.supersedes.chain) + u64(self.supersedes.seq)])
        )
        object.__setattr__(self, "body", body)
        object.__setattr__(self, "digest", hash_bytes(body))

    def encode(self) -> bytes:
        return self.body

    @property
    def parent(self) -> Coordinate:
        return Coordinate(self.coord.chain, self.parent_seq)

    @cached_property
    def refs(self) -> Tuple[Reference, ...]:
        """Parent edge followed by one edge per snapshot entry."""
        out = [Reference(self.coord, self.parent, self.digest, self.parent_digest)]
        for e in self.snapshot:
            out.append(Reference(self.coord, Coordinate(e.peer, e.seq), self.digest, e.digest))
        return tuple(out)

    def with_signature(self, sig: Signature) -> "State":
        # the signature is outside the body, so body and digest carry over
        out = copy.copy(self)
        object.__setattr__(out, "signature", sig)
        return out

    @staticmethod
    def read(reader: Reader) -> "State":
        reader.tag(Tag.STATE)
        coord = Coordinate(reader.u64(), reader.u64())
        root = reader.digest()
        mh = reader.digest()
        parent_seq = reader.u64()
        parent_digest = reader.digest()
        snap = []
        for _ in range(reader.count()):
            snap.append(SnapshotEntry(reader.u64(), reader.u64(), reader.digest()))
        sup = [Coordinate(reader.u64(), reader.u64()) for _ in range(reader.count())]
        if len(sup) > 1:
            raise DecodeError("supersedes holds at most one coordinate")
        return State(coord, root, mh, parent_seq, parent_digest, tuple(snap),
                     sup[0] if sup else None)


def encode_record(state: State, status: StateStatus) -> bytes:
    return bytes([Tag.STATE_RECORD]) + state.body + state.signature.encode() + u64(int(status))


def read_record(reader: Reader) -> Tuple[State, StateStatus]:
    reader.tag(Tag.STATE_RECORD)
    state = State.read(reader)
    sig = Signature.read(reader)
    try:
        status = StateStatus(reader.u64())
    except ValueError as exc:
        raise DecodeError(str(exc)) from None
    return state.with_signature(sig), status


class MessagePool:
    """Pending client messages, earliest Lamport timestamp first.

    Ties break by client id, then message id. Duplicate ids are refused.
    """

    def __init__(self) -> None:
        self._heap: List[Tuple[Tuple[int, int, bytes], ClientMessage]] = []
        self._seen: Set[bytes] = set()

    def __len__(self) -> int:
        return len(self._heap)

    def __contains__(self, msg_id: bytes) -> bool:
        return msg_id in self._seen

    def push(self, msg: ClientMessage) -> bool:
        if msg.id in self._seen:
            return False
        self._seen.add(msg.id)
        heapq.heappush(self._heap, (msg.order_key(), msg))
        return True

    def pop(self) -> ClientMessage:
        return heapq.heappop(self._heap)[1]

    def drain(self) -> Iterator[ClientMessage]:
        while self._heap:
            yield self.pop()


class Ledger:
    def __init__(self, owner: int, n: int):
        self.owner = owner
        self.n = n
        self.chain: List[State] = []
        self.status: Dict[Coordinate, StateStatus] = {}
        # latest live accepted state per peer; None means genesis
        self.remote: Dict[int, Optional[State]] = {p: None for p in range(n) if p != owner}
        self.remote_log: Dict[int, Dict[int, State]] = {p: {} for p in range(n) if p != owner}
        self.known: Dict[Coordinate, bytes] = {Coordinate(c, 0): genesis_digest(c) for c in range(n)}
        self.superseded_by: Dict[Coordinate, Coordinate] = {}
        self.edges: Set[Tuple[Coordinate, Coordinate]] = set()
        self.messages: Dict[bytes, ClientMessage] = {}
        # per chain, sorted seqs of live known states (genesis included)
        self._live: Dict[int, List[int]] = {c: [0] for c in range(n)}

    # -- chain access ---------------------------------------------------------

    def state_at(self, coord: Coordinate) -> Optional[State]:
        if coord.chain == self.owner:
            if 1 <= coord.seq <= len(self.chain):
                return self.chain[coord.seq - 1]
            return None
        return self.remote_log.get(coord.chain, {}).get(coord.seq)

    def head(self) -> Tuple[int, bytes]:
        """(seq, digest) of the latest live own state, genesis if none."""
        for state in reversed(self.chain):
            if self.status[state.coord].live:
                return state.coord.seq, state.digest
        return 0, genesis_digest(self.owner)

    def remote_head(self, peer: int) -> Tuple[int, bytes]:
        state = self.remote[peer]
        if state is None:
            return 0, genesis_digest(peer)
        return state.coord.seq, state.digest

    def snapshot(self) -> Tuple[SnapshotEntry, ...]:
        out = []
        for peer in sorted(self.remote):
            s, d = self.remote_head(peer)
            out.append(SnapshotEntry(peer, s, d))
        return tuple(out)

    # -- mutation ---------------------------------------------------------------

    def _index(self, state: State) -> None:
        self.known[state.coord] = state.digest
        bisect.insort(self._live[state.coord.chain], state.coord.seq)
        for ref in state.refs:
            self.edges.add((ref.src, ref.dst))

    def _unindex(self, state: State) -> None:
        seqs = self._live[state.coord.chain]
        i = bisect.bisect_left(seqs, state.coord.seq)
        if i < len(seqs) and seqs[i] == state.coord.seq:
            seqs.pop(i)
        for ref in state.refs:
            self.edges.discard((ref.src, ref.dst))

    def append_local(self, state: State, status: StateStatus = StateStatus.PROVISIONAL) -> Coordinate:
        if state.coord.chain != self.owner:
            raise ValueError(f"state belongs to chain {state.coord.chain}, not {self.owner}")
        if state.coord.seq != len(self.chain) + 1:
            raise SeqGap(f"expected seq {len(self.chain) + 1}, got {state.coord.seq}")
        head_seq, head_digest = self.head()
        if state.parent_digest != head_digest or state.parent_seq != head_seq:
            raise ParentMismatch(f"parent of {state.coord} does not match head {head_seq}")
        self.chain.append(state)
        self.status[state.coord] = status
        self._index(state)
        if state.supersedes is not None:
            self.superseded_by[state.supersedes] = state.coord
        return state.coord

    def set_status(self, coord: Coordinate, status: StateStatus) -> None:
        old = self.status[coord]
        if old == status:
            return
        if status not in _LEGAL.get(old, ()):
            raise LedgerError(f"illegal transition {old.name} -> {status.name} at {coord}")
        self.status[coord] = status
        if not status.live:
            state = self.state_at(coord)
            if state is not None:
                self._unindex(state)

    def update_remote(self, peer: int, state: State, replace: bool = False) -> bool:
        """Record ``state`` as the latest known state of ``peer``.

        A newer seq always advances the table. With ``replace`` an equal-seq
        state carrying a different digest replaces the stored one, which is
        marked superseded. Anything older is ignored.
        """
        if state.coord.chain != peer or peer == self.owner:
            raise ValueError(f"state {state.coord} is not a remote state of peer {peer}")
        head_seq, head_digest = self.remote_head(peer)
        if state.coord.seq > head_seq:
            self._store_remote(state)
            return True
        if replace and state.coord.seq == head_seq and state.digest != head_digest:
            old = self.remote[peer]
            if old is not None:
                self.set_status(old.coord, StateStatus.SUPERSEDED)
                del self.remote_log[peer][old.coord.seq]
            self._store_remote(state)
            return True
        return False

    def _store_remote(self, state: State) -> None:
        peer = state.coord.chain
        self.remote[peer] = state
        self.remote_log[peer][state.coord.seq] = state
        self.status[state.coord] = StateStatus.PROVISIONAL
        self._index(state)
        if state.supersedes is not None:
            self.superseded_by[state.supersedes] = state.coord

    def retire_remote_after(self, peer: int, seq_no: int) -> List[Coordinate]:
        """Retire live states of ``peer`` above ``seq_no`` (the proposer rolled back)."""
        retired = []
        for s in sorted(self.remote_log[peer]):
            state = self.remote_log[peer][s]
            if s > seq_no and self.status[state.coord].live:
                self.set_status(state.coord, StateStatus.SUPERSEDED)
                retired.append(state.coord)
        head = None
        for s in sorted(self.remote_log[peer], reverse=True):
            if self.status[self.remote_log[peer][s].coord].live:
                head = self.remote_log[peer][s]
                break
        self.remote[peer] = head
        return retired

    def log_message(self, msg: ClientMessage) -> bool:
        if msg.id in self.messages:
            return False
        self.messages[msg.id] = msg
        return True

    # -- ordering ------------------------------------------------------------------

    def resolve(self, coord: Coordinate) -> Coordinate:
        seen = 0
        while coord in self.superseded_by and seen <= len(self.superseded_by):
            coord = self.superseded_by[coord]
            seen += 1
        return coord

    def is_known(self, coord: Coordinate) -> bool:
        return self.resolve(coord) in self.known

    def _preds(self, coord: Coordinate) -> Iterable[Coordinate]:
        seqs = self._live.get(coord.chain, [])
        i = bisect.bisect_left(seqs, coord.seq)
        if i > 0:
            yield Coordinate(coord.chain, seqs[i - 1])
        state = self.state_at(coord)
        if state is not None and self.status.get(coord, StateStatus.PROVISIONAL).live:
            for e in state.snapshot:
                yield Coordinate(e.peer, e.seq)

    def _reaches(self, start: Coordinate, target: Coordinate) -> bool:
        """True if ``target`` happens before ``start`` via stored references."""
        stack = [start]
        seen = {start}
        while stack:
            cur = stack.pop()
            for p in self._preds(cur):
                # same chain at or above target: target precedes p structurally
                if p.chain == target.chain and p.seq >= target.seq:
                    return True
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return False

    def relative_order(self, a: Coordinate, b: Coordinate) -> Order:
        for c in (a, b):
            if not self.is_known(c):
                raise UnknownCoordinate(str(c))
        ra, rb = self.resolve(a), self.resolve(b)
        if ra == rb:
            return Order.UNRELATED
        if ra.chain == rb.chain:
            return Order.BEFORE if ra.seq < rb.seq else Order.AFTER
        if self._reaches(rb, ra):
            return Order.BEFORE
        if self._reaches(ra, rb):
            return Order.AFTER
        return Order.UNRELATED

    def _latest_live_below(self, chain: int, seq_no: int) -> Optional[State]:
        seqs = self._live.get(chain, [])
        i = bisect.bisect_left(seqs, seq_no)
        while i > 0:
            i -= 1
            if seqs[i] == 0:
                return None
            state = self.state_at(Coordinate(chain, seqs[i]))
            if state is not None:
                return state
        return None

    def detect_conflict(self, claimed: Reference, pending: Optional[State] = None) -> bool:
        """Does ``claimed`` contradict what this ledger holds?

        ``pending`` is a state under validation; it counts as known.
        """

        def digest_of(c: Coordinate) -> Optional[bytes]:
            if pending is not None and c == pending.coord:
                return pending.digest
            rc = self.resolve(c)
            if rc != c:
                # a retired coordinate: only its replacement is authoritative
                return None
            return self.known.get(c)

        src_d = digest_of(claimed.src)
        dst_d = digest_of(claimed.dst)
        if src_d is not None and src_d != claimed.src_digest:
            return True
        if dst_d is not None and dst_d != claimed.dst_digest:
            return True
        if (claimed.dst, claimed.src) in self.edges:
            return True
        if claimed.src.chain == claimed.dst.chain:
            if src_d is not None and dst_d is not None:
                return self.resolve(claimed.src).seq <= self.resolve(claimed.dst).seq
            return claimed.src == claimed.dst
        # the proposer's chain must not observe the referenced chain going backwards
        if pending is not None and claimed.src == pending.coord:
            prev = self.state_at(pending.parent)
        else:
            prev = self._latest_live_below(claimed.src.chain, claimed.src.seq)
        if prev is not None:
            for e in prev.snapshot:
                if e.peer == claimed.dst.chain:
                    if e.seq > claimed.dst.seq:
                        return True
                    if e.seq == claimed.dst.seq and e.digest != claimed.dst_digest:
                        return True
        return False

    # -- accounting & persistence ----------------------------------------------------

    def disk_usage(self) -> Tuple[int, int]:
        local = sum(len(encode_record(s, self.status[s.coord])) for s in self.chain)
        remote = sum(len(encode_record(s, self.status[s.coord]))
                     for s in self.remote.values() if s is not None)
        return local, remote

    def serialize(self) -> bytes:
        parts = [
            MAGIC,
            u64(self.owner),
            u64(self.n),
            seq(encode_record(s, self.status[s.coord]) for s in self.chain),
            seq(
                u64(peer) + seq([] if st is None else [encode_record(st, self.status[st.coord])])
                for peer, st in sorted(self.remote.items())
            ),
        ]
        body = b"".join(parts)
        return body + hash_bytes(body)

    @classmethod
    def deserialize(cls, data: bytes) -> "Ledger":
        if len(data) < len(MAGIC) + DIGEST_SIZE or not data.startswith(MAGIC):
            raise CorruptFile("missing magic or too short")
        body, tail = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
        if hash_bytes(body) != tail:
            raise CorruptFile("trailing digest mismatch")
        try:
            reader = Reader(body, len(MAGIC))
            owner = reader.u64()
            n = reader.u64()
            ledger = cls(owner, n)
            for _ in range(reader.count()):
                state, status = read_record(reader)
                ledger.chain.append(state)
                ledger.status[state.coord] = status
                if status.live:
                    ledger._index(state)
                if state.supersedes is not None:
                    ledger.superseded_by[state.supersedes] = state.coord
            for _ in range(reader.count()):
                peer = reader.u64()
                entries = [read_record(reader) for _ in range(reader.count())]
                if peer not in ledger.remote or len(entries) > 1:
                    raise CorruptFile(f"bad remote entry for peer {peer}")
                if entries:
                    state, status = entries[0]
                    ledger._store_remote(state)
                    ledger.status[state.coord] = status
            if not reader.at_end():
                raise CorruptFile("trailing bytes")
        except DecodeError as exc:
            raise CorruptFile(str(exc)) from None
        return ledger

    def persist(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                fh.write(self.serialize())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "Ledger":
        if not path or not os.path.isfile(path):
            raise IoFailure(f"no ledger file at {path!r}")
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return cls.deserialize(data)


def persist(ledger: Ledger, path) -> None:
    ledger.persist(path)


def load(path) -> Ledger:
    return Ledger.load(path)


register_decoder(Tag.REFERENCE, Reference.read)
register_decoder(Tag.CLIENT_MESSAGE, ClientMessage.read)
register_decoder(Tag.STATE, State.read)
