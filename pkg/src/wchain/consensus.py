"""Per-node consensus engine.

One engine per node. It is a plain state machine: each ``on_*`` call takes
one input event and returns the outbound messages it causes. There are no
timers; time only arrives through ``now`` arguments and ``on_tick``.

Every node runs Pre-prepare / Prepare / Commit for its own chain in
parallel with everybody else's. A state whose relationship cannot gather
a quorum is rebroadcast up to ``retry_bound`` times; after that the node
pulls the newest states from its peers, re-attaches any state that
conflicts with the majority view, and finally times the message out.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .codec import DEFAULT_SCHEME, KeyPair, SignatureScheme, genesis_digest
from .ledger import (
    ClientMessage,
    Coordinate,
    Ledger,
    MessagePool,
    SnapshotEntry,
    State,
    StateStatus,
    check_membership,
)
from .merkle import build_tree, make_bundle, verify_bundle
from .messages import (
    ClientReply,
    Commit,
    Outcome,
    Prepare,
    PrePrepare,
    PullRequest,
    PullResponse,
    sign_state,
    signed,
)

log = logging.getLogger(__name__)

CLIENT = -1  # destination of client replies
Key = Tuple[Coordinate, bytes]


class InvalidF(ValueError):
    pass


class DuplicateMessage(Exception):
    pass


class EngineHalted(Exception):
    pass


def quorum_threshold(f: int) -> int:
    if f < 1:
        raise InvalidF(f"f must be >= 1, got {f}")
    return 2 * f + 1


@dataclass(frozen=True)
class Send:
    """An outbound message. ``dst`` None means every peer."""

    dst: Optional[int]
    msg: object
    delay: Optional[int] = None


@dataclass
class EngineConfig:
    n: int
    f: int
    node: int
    keypair: KeyPair
    publics: Dict[int, bytes]
    retry_bound: int = 3
    timeout_ticks: int = 2000
    buffer_bound: int = 64
    scheme: SignatureScheme = field(default=DEFAULT_SCHEME)

    def __post_init__(self):
        check_membership(self.n, self.f)
        if self.keypair.owner != self.node:
            raise ValueError("keypair does not belong to this node")

    @property
    def quorum(self) -> int:
        return quorum_threshold(self.f)

    @property
    def retry_interval(self) -> int:
        return max(1, self.timeout_ticks // (self.retry_bound + 2))


class QuorumTracker:
    """Distinct Prepare / Commit senders per (coordinate, digest)."""

    def __init__(self, threshold: int):
        self.threshold = threshold
        self.prepares: Dict[Key, Set[int]] = defaultdict(set)
        self.commits: Dict[Key, Set[int]] = defaultdict(set)
        self.commit_emitted: Set[Key] = set()

    def add_prepare(self, key: Key, sender: int) -> int:
        self.prepares[key].add(sender)
        return len(self.prepares[key])

    def add_commit(self, key: Key, sender: int) -> int:
        self.commits[key].add(sender)
        return len(self.commits[key])

    def prepared(self, key: Key) -> bool:
        return len(self.prepares.get(key, ())) >= self.threshold

    def committed(self, key: Key) -> bool:
        return len(self.commits.get(key, ())) >= self.threshold


@dataclass
class RetryCounter:
    msg: ClientMessage
    pp: PrePrepare
    submitted: int
    deadline: int
    expires: int
    retries: int = 0
    retry_bound: int = 3
    repaired: bool = False
    pulling: bool = False


def build_preprepare(
    keypair: KeyPair,
    scheme: SignatureScheme,
    msg: ClientMessage,
    seq_no: int,
    parent_seq: int,
    parent_digest: bytes,
    snapshot: Tuple[SnapshotEntry, ...],
    supersedes: Optional[Coordinate] = None,
) -> PrePrepare:
    """Insert ``msg`` into a fresh Merkle tree and wrap it as a signed Pre-prepare."""
    tree = build_tree(msg.id, [e.digest for e in snapshot])
    state = State(
        Coordinate(keypair.owner, seq_no), tree.root, msg.id,
        parent_seq, parent_digest, snapshot, supersedes,
    )
    state = sign_state(state, keypair, scheme)
    bundle = make_bundle(tree, parent_seq, parent_digest)
    pp = PrePrepare(msg, seq_no, state, bundle, state.refs, keypair.owner)
    return signed(pp, keypair, scheme)


class Engine:
    def __init__(self, config: EngineConfig):
        self.config = config
        self.id = config.node
        self.ledger = Ledger(config.node, config.n)
        self.pool = MessagePool()
        self.tracker = QuorumTracker(config.quorum)
        self.validated: Set[Key] = set()
        self.pending: Dict[Coordinate, RetryCounter] = {}
        self.buffer: Dict[int, List[PrePrepare]] = defaultdict(list)
        # Pre-prepares refused on chain or conflict grounds, retried after a repair
        self.rejected: Dict[Key, PrePrepare] = {}
        # Pre-prepares that already passed checks (a) and (b); buffered ones come back
        self.authentic: Set[bytes] = set()
        self.pull_open = False
        self.pull_started: Optional[int] = None
        self.pull_responses: Dict[int, PullResponse] = {}
        self.halted = False
        self._deadline: Optional[int] = None
        self._deadline_stale = False
        self.notes: List[Tuple[str, str]] = []
        self.stats: Dict[str, int] = defaultdict(int)

    # -- helpers -------------------------------------------------------------------

    def _note(self, key: str, value: str = "") -> None:
        self.notes.append((key, value))

    def take_notes(self) -> List[Tuple[str, str]]:
        out, self.notes = self.notes, []
        return out

    def _sign(self, msg):
        return signed(msg, self.config.keypair, self.config.scheme)

    def _verify(self, signer: int, body: bytes, sig) -> bool:
        public = self.config.publics.get(signer)
        if public is None or sig.signer != signer:
            return False
        return self.config.scheme.verify(public, body, sig)

    def halt(self) -> None:
        self.halted = True

    def next_deadline(self) -> Optional[int]:
        if self._deadline_stale:
            self._deadline_stale = False
            self._deadline = min(
                (rc.deadline if rc.deadline < rc.expires else rc.expires for rc in self.pending.values()),
                default=None,
            )
        return self._deadline

    # -- record: client requests -----------------------------------------------------

    def on_client_request(self, msg: ClientMessage, now: int) -> List[Send]:
        if self.halted:
            raise EngineHalted(f"node {self.id} is halted")
        if not self.pool.push(msg):
            self._note("abort", "dup")
            raise DuplicateMessage(msg.id.hex())
        out = []
        for m in self.pool.drain():
            out.append(self._propose(m, now, now, now + self.config.timeout_ticks))
        return out

    def _propose(
        self,
        msg: ClientMessage,
        now: int,
        submitted: int,
        expires: int,
        supersedes: Optional[Coordinate] = None,
    ) -> Send:
        ledger = self.ledger
        parent_seq, parent_digest = ledger.head()
        pp = build_preprepare(
            self.config.keypair, self.config.scheme, msg, len(ledger.chain) + 1,
            parent_seq, parent_digest, ledger.snapshot(), supersedes,
        )
        state = pp.state
        ledger.append_local(state)
        ledger.log_message(msg)
        key = (state.coord, state.digest)
        self.validated.add(key)
        self.tracker.add_prepare(key, self.id)
        self._deadline_stale = True
        self.pending[state.coord] = RetryCounter(
            msg, pp, submitted, now + self.config.retry_interval, expires,
            retry_bound=self.config.retry_bound, repaired=supersedes is not None,
        )
        self._note("pp", f"{state.coord}:{state.digest.hex()}")
        return Send(None, pp)

    # -- validate: Pre-prepare ----------------------------------------------------------

    def on_preprepare(self, pp: PrePrepare, now: int) -> List[Send]:
        state = pp.state
        key = (state.coord, state.digest)
        if key in self.validated:
            self._note("dup_pp", str(state.coord))
            return []
        reason = self._check_preprepare(pp)
        if reason == "buffer":
            self._buffer(pp)
            return []
        if reason:
            self.stats[f"abort_{reason}"] += 1
            self._note("abort", reason)
            if reason in ("c", "d"):
                self.rejected[key] = pp
                if len(self.rejected) > self.config.buffer_bound:
                    del self.rejected[next(iter(self.rejected))]
                if self._vouched(key):
                    return self._pull(now, self._disputed())
            return []
        self.rejected.pop(key, None)
        self.authentic.discard(pp.wire_id)
        return self._accept(pp, now)

    def _check_preprepare(self, pp: PrePrepare) -> str:
        state = pp.state
        sender = pp.sender
        ledger = self.ledger
        if pp.wire_id not in self.authentic:
            reason = self._check_authentic(pp)
            if reason:
                return reason
            self.authentic.add(pp.wire_id)
        # (c) the state extends the sender's chain as we know it
        head_seq, head_digest = ledger.remote_head(sender)
        if state.coord.seq <= head_seq:
            return "c"
        if state.parent_seq != head_seq or state.parent_digest != head_digest:
            if state.parent_seq > head_seq:
                return "buffer"
            if not self._can_roll_back(sender, state.parent_seq, state.parent_digest):
                return "c"
        # (d) no claimed relationship contradicts what we hold
        for ref in pp.refs:
            if ledger.detect_conflict(ref, pending=state):
                return "d"
        if tuple(pp.refs) != state.refs:
            return "d"
        return ""

    def _check_authentic(self, pp: PrePrepare) -> str:
        state = pp.state
        sender = pp.sender
        # (a) signatures of the envelope and of the state
        if sender == self.id or state.coord.chain != sender or sender not in self.ledger.remote:
            return "a"
        if not self._verify(sender, pp.body, pp.sig):
            return "a"
        if not self._verify(sender, state.body, state.signature):
            return "a"
        # (b) the message is in the state's tree
        if pp.sn != state.coord.seq or state.message_hash != pp.msg.id:
            return "b"
        if (pp.proof.parent_seq, pp.proof.parent_digest) != (state.parent_seq, state.parent_digest):
            return "b"
        ok, _ = verify_bundle(pp.proof, state.merkle_root, pp.msg.id, [e.digest for e in state.snapshot])
        if not ok:
            return "b"
        return ""

    def _can_roll_back(self, sender: int, parent_seq: int, parent_digest: bytes) -> bool:
        ledger = self.ledger
        if parent_seq == 0:
            if parent_digest != genesis_digest(sender):
                return False
        else:
            parent = ledger.remote_log[sender].get(parent_seq)
            if parent is None or parent.digest != parent_digest:
                return False
            if not ledger.status[parent.coord].live:
                return False
        for s, st in ledger.remote_log[sender].items():
            if s > parent_seq and ledger.status[st.coord] == StateStatus.COMMITTED:
                return False
        return True

    def _buffer(self, pp: PrePrepare) -> None:
        queue = self.buffer[pp.sender]
        if any(b.state.digest == pp.state.digest for b in queue):
            return
        queue.append(pp)
        if len(queue) > self.config.buffer_bound:
            queue.pop(0)
        self._note("buffer", str(pp.state.coord))

    def _accept(self, pp: PrePrepare, now: int) -> List[Send]:
        state = pp.state
        sender = pp.sender
        ledger = self.ledger
        head_seq, head_digest = ledger.remote_head(sender)
        if state.parent_seq != head_seq or state.parent_digest != head_digest:
            for c in ledger.retire_remote_after(sender, state.parent_seq):
                self._note("retire", str(c))
        ledger.update_remote(sender, state)
        ledger.log_message(pp.msg)
        key = (state.coord, state.digest)
        self.validated.add(key)
        # the Pre-prepare is the originator's own vote
        self.tracker.add_prepare(key, sender)
        self.tracker.add_prepare(key, self.id)
        out = [Send(None, self._sign(Prepare(state.coord, state.digest, self.id)))]
        self._note("prepare", f"{state.coord}:{state.digest.hex()}")
        out.extend(self._maybe_commit(key))
        out.extend(self._drain_buffer(sender, now))
        return out

    def _drain_buffer(self, sender: int, now: int) -> List[Send]:
        queue = self.buffer.get(sender)
        if not queue:
            return []
        head_seq, head_digest = self.ledger.remote_head(sender)
        for i, pp in enumerate(queue):
            if pp.state.parent_seq == head_seq and pp.state.parent_digest == head_digest:
                del queue[i]
                return self.on_preprepare(pp, now)
        # drop anything the chain has moved past
        queue[:] = [pp for pp in queue if pp.state.coord.seq > head_seq]
        return []

    # -- Prepare / Commit ----------------------------------------------------------------

    def on_prepare(self, p: Prepare) -> List[Send]:
        if not self._verify(p.sender, p.body, p.sig):
            self.stats["bad_sig"] += 1
            self._note("drop", "sig")
            return []
        key = (p.coord, p.digest)
        self.tracker.add_prepare(key, p.sender)
        return self._maybe_commit(key)

    def _maybe_commit(self, key: Key) -> List[Send]:
        tracker = self.tracker
        if key not in self.validated or key in tracker.commit_emitted or not tracker.prepared(key):
            return []
        state = self.ledger.state_at(key[0])
        if state is None or state.digest != key[1] or not self.ledger.status[key[0]].live:
            return []
        tracker.commit_emitted.add(key)
        if self.ledger.status[key[0]] == StateStatus.PROVISIONAL:
            self.ledger.set_status(key[0], StateStatus.PREPARED)
        tracker.add_commit(key, self.id)
        self._note("commit", f"{key[0]}:{key[1].hex()}")
        out = [Send(None, self._sign(Commit(key[0], key[1], self.id)))]
        out.extend(self._maybe_committed(key))
        return out

    def on_commit(self, c: Commit, now: int = 0) -> List[Send]:
        if not self._verify(c.sender, c.body, c.sig):
            self.stats["bad_sig"] += 1
            self._note("drop", "sig")
            return []
        key = (c.coord, c.digest)
        self.tracker.add_commit(key, c.sender)
        if self._vouched(key):
            return self._pull(now, self._disputed())
        return self._maybe_committed(key)

    def _vouched(self, key: Key) -> bool:
        """f+1 Commits for a state we refused: an honest node accepted it, so our view is stale."""
        return key in self.rejected and len(self.tracker.commits.get(key, ())) > self.config.f

    def _maybe_committed(self, key: Key) -> List[Send]:
        coord, digest = key
        if key not in self.validated or not self.tracker.committed(key):
            return []
        ledger = self.ledger
        state = ledger.state_at(coord)
        if state is None or state.digest != digest:
            return []
        status = ledger.status[coord]
        if not status.live or status == StateStatus.COMMITTED:
            return []
        if status == StateStatus.PROVISIONAL:
            ledger.set_status(coord, StateStatus.PREPARED)
        ledger.set_status(coord, StateStatus.COMMITTED)
        self._note("committed", f"{coord}:{digest.hex()}")
        rc = self.pending.pop(coord, None)
        self._deadline_stale = True
        if rc is None:
            return []
        reply = self._sign(ClientReply(rc.msg.id, Outcome.COMMITTED, coord, self.id))
        self._note("reply", f"{rc.msg.id.hex()}:committed:{coord}")
        return [Send(CLIENT, reply)]

    # -- complementary mechanism -----------------------------------------------------------

    def on_tick(self, now: int) -> List[Send]:
        self._deadline_stale = True
        out: List[Send] = []
        want_pull = False
        for coord in sorted(self.pending):
            rc = self.pending[coord]
            if now >= rc.expires:
                del self.pending[coord]
                if self.ledger.status[coord].live:
                    self.ledger.set_status(coord, StateStatus.ABORTED)
                outcome = Outcome.FAILURE if rc.repaired else Outcome.TIMEOUT
                self._note("aborted", str(coord))
                self._note("reply", f"{rc.msg.id.hex()}:{outcome.name.lower()}:{coord}")
                out.append(Send(CLIENT, self._sign(ClientReply(rc.msg.id, outcome, coord, self.id))))
                continue
            if now < rc.deadline:
                continue
            rc.deadline = now + self.config.retry_interval
            if rc.retries < rc.retry_bound:
                rc.retries += 1
                self._note("retry", f"{coord}:{rc.retries}")
                out.append(Send(None, rc.pp))
            else:
                rc.pulling = True
                want_pull = True
        if want_pull:
            out.extend(self._pull(now, self._disputed()))
        return out

    def _disputed(self) -> Tuple[Coordinate, ...]:
        """Remote coordinates our stuck or refused states depend on."""
        coords = set()
        states = [rc.pp.state for rc in self.pending.values() if rc.pulling]
        states += [pp.state for pp in self.rejected.values()]
        for st in states:
            coords.update(Coordinate(e.peer, e.seq) for e in st.snapshot if e.seq > 0)
            if st.coord.chain != self.id and st.parent_seq > 0:
                coords.add(st.parent)
        return tuple(sorted(coords)[:self.config.buffer_bound])

    def _pull(self, now: int, coords: Tuple[Coordinate, ...] = ()) -> List[Send]:
        if self.pull_started is not None and now - self.pull_started < self.config.retry_interval:
            return []
        self.pull_open = True
        self.pull_started = now
        self.pull_responses = {}
        self._note("pull", str(len(coords)))
        return [Send(None, self._sign(PullRequest(self.id, coords)))]

    def on_pull_request(self, req: PullRequest) -> List[Send]:
        if not self._verify(req.sender, req.body, req.sig):
            self._note("drop", "sig")
            return []
        return [Send(req.sender, self.pull_response(req.coords))]

    def pull_response(self, coords: Tuple[Coordinate, ...] = ()) -> PullResponse:
        ledger = self.ledger
        states = []
        for st in reversed(ledger.chain):
            if ledger.status[st.coord].live:
                states.append(st)
                break
        states.extend(st for _, st in sorted(ledger.remote.items()) if st is not None)
        seen = {st.coord for st in states}
        for c in coords:
            st = ledger.state_at(c)
            if st is not None and c not in seen and ledger.status[c].live:
                states.append(st)
                seen.add(c)
        return self._sign(PullResponse(self.id, tuple(states)))

    def on_pull_response(self, pr: PullResponse, now: int) -> List[Send]:
        if not self.pull_open or pr.sender in self.pull_responses or pr.sender == self.id:
            return []
        if not self._verify(pr.sender, pr.body, pr.sig):
            self._note("drop", "sig")
            return []
        self.pull_responses[pr.sender] = pr
        if len(self.pull_responses) < 2 * self.config.f:
            return []
        self.pull_open = False
        responses = self.pull_responses
        self.pull_responses = {}
        self._adopt(responses)
        out = self._repair(now)
        for key, pp in list(self.rejected.items()):
            if key not in self.validated:
                del self.rejected[key]
                out.extend(self.on_preprepare(pp, now))
        return out

    def _adopt(self, responses: Dict[int, PullResponse]) -> None:
        """Fold the pulled views into the remote table, majority digest per coordinate."""
        ledger = self.ledger
        votes: Dict[Coordinate, Dict[bytes, List[int]]] = defaultdict(lambda: defaultdict(list))
        states: Dict[bytes, State] = {}
        for responder in sorted(responses):
            for st in responses[responder].states:
                chain = st.coord.chain
                if chain == self.id or chain not in ledger.remote:
                    continue
                if not self._verify(chain, st.body, st.signature):
                    continue
                votes[st.coord][st.digest].append(responder)
                states[st.digest] = st

        def majority(coord: Coordinate) -> State:
            ballots = votes[coord]
            best = max(ballots, key=lambda d: (len(ballots[d]), -min(ballots[d])))
            return states[best]

        for chain in sorted(ledger.remote):
            coords = sorted(c for c in votes if c.chain == chain)
            if not coords:
                continue
            # correct any state we hold that the majority disagrees with
            for coord in coords:
                winner = majority(coord)
                local = ledger.remote_log[chain].get(coord.seq)
                if local is None or local.digest == winner.digest or not ledger.status[local.coord].live:
                    continue
                if not self._replaceable(chain, coord.seq - 1):
                    continue
                for c in ledger.retire_remote_after(chain, coord.seq - 1):
                    self._note("retire", str(c))
                ledger.update_remote(chain, winner)
                ledger.known[winner.coord] = winner.digest
                self._note("adopt", f"{winner.coord}:{winner.digest.hex()}")
            newest = majority(coords[-1])
            head_seq, head_digest = ledger.remote_head(chain)
            if newest.coord.seq <= head_seq:
                continue
            parent = ledger.remote_log[chain].get(newest.parent_seq)
            if parent is not None and parent.digest != newest.parent_digest:
                if not self._replaceable(chain, newest.parent_seq - 1):
                    continue
                for c in ledger.retire_remote_after(chain, newest.parent_seq - 1):
                    self._note("retire", str(c))
            elif newest.parent_seq < head_seq:
                if not self._replaceable(chain, newest.parent_seq):
                    continue
                for c in ledger.retire_remote_after(chain, newest.parent_seq):
                    self._note("retire", str(c))
            if ledger.update_remote(chain, newest):
                ledger.known.setdefault(newest.parent, newest.parent_digest)
                self._note("adopt", f"{newest.coord}:{newest.digest.hex()}")

    def _replaceable(self, chain: int, above_seq: int) -> bool:
        ledger = self.ledger
        return not any(
            s > above_seq and ledger.status[st.coord] == StateStatus.COMMITTED
            for s, st in ledger.remote_log[chain].items()
        )

    def _conflicts_with_view(self, state: State) -> bool:
        ledger = self.ledger
        for e in state.snapshot:
            c = Coordinate(e.peer, e.seq)
            if e.seq == 0:
                continue
            status = ledger.status.get(c)
            if status is not None and not status.live:
                return True
            known = ledger.known.get(c)
            if known is not None and known != e.digest:
                return True
        return False

    def _repair(self, now: int) -> List[Send]:
        self._deadline_stale = True
        ledger = self.ledger
        stuck = [st for st in ledger.chain
                 if st.coord in self.pending and ledger.status[st.coord].live]
        first = next((i for i, st in enumerate(stuck) if self._conflicts_with_view(st)), None)
        out: List[Send] = []
        if first is None:
            for st in stuck:
                rc = self.pending[st.coord]
                if rc.pulling:
                    rc.pulling = False
                    rc.deadline = now + self.config.retry_interval
                    out.append(Send(None, rc.pp))
                    self._note("rebroadcast", str(st.coord))
            return out
        retired = stuck[first:]
        counters = []
        for st in retired:
            ledger.set_status(st.coord, StateStatus.SUPERSEDED)
            counters.append(self.pending.pop(st.coord))
        for st, rc in zip(retired, counters):
            send = self._propose(rc.msg, now, rc.submitted, rc.expires, supersedes=st.coord)
            new = send.msg.state.coord
            self._note("supersede", f"{st.coord}>{new}")
            out.append(send)
        for st in stuck[:first]:
            rc = self.pending[st.coord]
            if rc.pulling:
                rc.pulling = False
                rc.deadline = now + self.config.retry_interval
                out.append(Send(None, rc.pp))
        return out

    # -- dispatch ----------------------------------------------------------------------------

    def handle(self, msg, now: int) -> List[Send]:
        if isinstance(msg, PrePrepare):
            return self.on_preprepare(msg, now)
        if isinstance(msg, Commit):
            return self.on_commit(msg, now)
        if isinstance(msg, Prepare):
            return self.on_prepare(msg)
        if isinstance(msg, PullRequest):
            return self.on_pull_request(msg)
        if isinstance(msg, PullResponse):
            return self.on_pull_response(msg, now)
        if isinstance(msg, ClientMessage):
            return self.on_client_request(msg, now)
        raise TypeError(f"engine cannot handle {type(msg).__name__}")
