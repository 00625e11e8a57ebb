import itertools
import os
import random

import pytest

from wchain.codec import KeyedHashScheme, genesis_digest
from wchain.consensus import build_preprepare
from wchain.harness import run_scenario
from wchain.ledger import (
    ClientMessage,
    Coordinate,
    CorruptFile,
    IoFailure,
    Ledger,
    LedgerError,
    MessagePool,
    Order,
    ParentMismatch,
    Reference,
    SeqGap,
    SnapshotEntry,
    StateStatus,
    UnknownCoordinate,
    encode_record,
)
from support import random_ledger, scenario

SCHEME = KeyedHashScheme()
KEYS = {i: SCHEME.keygen(3, i) for i in range(7)}


def make_state(chain, seq_no, parent_seq, parent_digest, snapshot=(), supersedes=None, payload=b"p"):
    msg = ClientMessage(chain, seq_no, payload)
    pp = build_preprepare(KEYS[chain], SCHEME, msg, seq_no, parent_seq, parent_digest, snapshot, supersedes)
    return pp.state


def grow(ledger, count, payload=b"p"):
    for _ in range(count):
        parent_seq, parent_digest = ledger.head()
        ledger.append_local(make_state(ledger.owner, len(ledger.chain) + 1, parent_seq, parent_digest,
                                       ledger.snapshot(), payload=payload))


def remote_chain(peer, depth):
    out, parent_seq, parent_digest = [], 0, genesis_digest(peer)
    for s in range(1, depth + 1):
        st = make_state(peer, s, parent_seq, parent_digest)
        out.append(st)
        parent_seq, parent_digest = s, st.digest
    return out


def test_append_first_state():
    ledger = Ledger(0, 4)
    st = make_state(0, 1, 0, genesis_digest(0))
    assert ledger.append_local(st) == Coordinate(0, 1)
    assert ledger.head() == (1, st.digest)


def test_append_gap_and_parent_mismatch():
    ledger = Ledger(0, 4)
    grow(ledger, 3)
    seq_no, digest = ledger.head()
    with pytest.raises(SeqGap):
        ledger.append_local(make_state(0, 5, seq_no, digest))
    with pytest.raises(ParentMismatch):
        ledger.append_local(make_state(0, 4, seq_no, bytes(32)))
    with pytest.raises(ValueError):
        ledger.append_local(make_state(1, 4, seq_no, digest))
    assert len(ledger.chain) == 3


def test_parent_chain_integrity():
    ledger = Ledger(2, 4)
    grow(ledger, 8)
    assert ledger.chain[0].parent_digest == genesis_digest(2)
    for prev, cur in zip(ledger.chain, ledger.chain[1:]):
        assert cur.parent_digest == prev.digest and cur.parent_seq == prev.coord.seq


def test_status_transitions():
    ledger = Ledger(0, 4)
    grow(ledger, 2)
    c = Coordinate(0, 1)
    ledger.set_status(c, StateStatus.PREPARED)
    ledger.set_status(c, StateStatus.COMMITTED)
    with pytest.raises(LedgerError):
        ledger.set_status(c, StateStatus.ABORTED)
    ledger.set_status(Coordinate(0, 2), StateStatus.ABORTED)
    # an aborted head no longer counts as the parent of the next state
    assert ledger.head() == (1, ledger.chain[0].digest)


def test_update_remote():
    ledger = Ledger(0, 4)
    chain = remote_chain(2, 4)
    assert ledger.update_remote(2, chain[0])
    assert ledger.remote_head(2) == (1, chain[0].digest)
    assert ledger.update_remote(2, chain[3])
    assert not ledger.update_remote(2, chain[2])
    assert ledger.remote_head(2) == (4, chain[3].digest)
    with pytest.raises(ValueError):
        ledger.update_remote(1, chain[0])


def test_update_remote_replacement():
    ledger = Ledger(0, 4)
    first = remote_chain(1, 2)
    ledger.update_remote(1, first[0])
    ledger.update_remote(1, first[1])
    ledger.set_status(first[1].coord, StateStatus.PREPARED)
    replacement = make_state(1, 2, 1, first[0].digest, payload=b"other")
    assert not ledger.update_remote(1, replacement)
    assert ledger.update_remote(1, replacement, replace=True)
    assert ledger.remote_head(1) == (2, replacement.digest)
    assert not ledger.update_remote(1, replacement, replace=True)


def test_message_log_and_pool():
    ledger = Ledger(0, 4)
    m = ClientMessage(1, 5, b"x")
    assert ledger.log_message(m)
    assert not ledger.log_message(ClientMessage(1, 5, b"x"))
    pool = MessagePool()
    for msg in [ClientMessage(2, 9, b"a"), ClientMessage(1, 3, b"b"), ClientMessage(0, 9, b"c")]:
        assert pool.push(msg)
    assert not pool.push(ClientMessage(1, 3, b"b"))
    assert [(x.lamport_ts, x.client) for x in pool.drain()] == [(3, 1), (9, 0), (9, 2)]


def test_relative_order_same_chain():
    ledger = Ledger(3, 4)
    grow(ledger, 2)
    assert ledger.relative_order(Coordinate(3, 1), Coordinate(3, 2)) is Order.BEFORE
    assert ledger.relative_order(Coordinate(3, 2), Coordinate(3, 1)) is Order.AFTER
    assert ledger.relative_order(Coordinate(3, 1), Coordinate(3, 1)) is Order.UNRELATED
    with pytest.raises(UnknownCoordinate):
        ledger.relative_order(Coordinate(3, 1), Coordinate(3, 9))


def test_relative_order_after_supersession():
    ledger = Ledger(1, 4)
    grow(ledger, 5)
    ledger.set_status(Coordinate(1, 2), StateStatus.SUPERSEDED)
    parent_seq, parent_digest = ledger.head()
    ledger.append_local(make_state(1, 6, parent_seq, parent_digest, ledger.snapshot(),
                                   supersedes=Coordinate(1, 2)))
    assert ledger.resolve(Coordinate(1, 2)) == Coordinate(1, 6)
    assert ledger.relative_order(Coordinate(1, 1), Coordinate(1, 2)) is Order.BEFORE
    # the reattached state now follows what used to come after it
    assert ledger.relative_order(Coordinate(1, 5), Coordinate(1, 2)) is Order.BEFORE


def test_relative_order_across_chains():
    ledger = Ledger(0, 4)
    peer1 = remote_chain(1, 1)[0]
    peer2 = remote_chain(2, 3)
    ledger.update_remote(1, peer1)
    ledger.update_remote(2, peer2[2])
    grow(ledger, 1)  # snapshot records (1,1) and (2,3)
    assert ledger.relative_order(Coordinate(1, 1), Coordinate(0, 1)) is Order.BEFORE
    assert ledger.relative_order(Coordinate(0, 1), Coordinate(2, 3)) is Order.AFTER
    assert ledger.relative_order(Coordinate(1, 1), Coordinate(2, 3)) is Order.UNRELATED


def test_detect_conflict_examples():
    ledger = Ledger(0, 4)
    chain = remote_chain(3, 2)
    ledger.update_remote(3, chain[0])
    ledger.update_remote(3, chain[1])
    c1, c2 = Coordinate(3, 1), Coordinate(3, 2)
    stored = Reference(c2, c1, chain[1].digest, chain[0].digest)
    assert not ledger.detect_conflict(stored)
    assert ledger.detect_conflict(stored.reversed())
    wrong_digest = Reference(c2, c1, bytes(32), chain[0].digest)
    assert ledger.detect_conflict(wrong_digest)
    unknown = Reference(Coordinate(2, 7), Coordinate(1, 4), bytes(32), bytes(32))
    assert not ledger.detect_conflict(unknown)


@pytest.mark.parametrize("seed", [3, 11])
def test_detect_conflict_direction_is_consistent(seed):
    """Every stored reference is accepted as stored and refused once reversed."""
    ledgers = run_scenario(scenario(seed=seed, messages=30)).ledgers
    for ledger in ledgers.values():
        refs = [r for s in list(ledger.chain) + [s for log in ledger.remote_log.values() for s in log.values()]
                if ledger.status[s.coord].live for r in s.refs]
        assert refs
        for ref in refs:
            assert not ledger.detect_conflict(ref)
            assert ledger.detect_conflict(ref.reversed())


def test_disk_usage():
    ledger = Ledger(0, 4)
    assert ledger.disk_usage() == (0, 0)
    grow(ledger, 1)
    one = ledger.disk_usage()[0]
    assert one == len(encode_record(ledger.chain[0], StateStatus.PROVISIONAL))
    grow(ledger, 9)
    assert ledger.disk_usage() == (10 * one, 0)


def test_remote_bytes_static_as_chain_grows():
    ledger = Ledger(0, 4)
    for peer in (1, 2, 3):
        ledger.update_remote(peer, remote_chain(peer, 2)[-1])
    seen = set()
    for _ in range(6):
        grow(ledger, 3)
        seen.add(ledger.disk_usage()[1])
    assert len(seen) == 1 and seen.pop() > 0


def test_round_trip_100_states(tmp_path):
    ledger = Ledger(1, 4)
    for peer in (0, 2):
        ledger.update_remote(peer, remote_chain(peer, 3)[-1])
    grow(ledger, 100)
    for s in range(1, 101, 3):
        ledger.set_status(Coordinate(1, s), StateStatus.COMMITTED)
    path = tmp_path / "l.wledger"
    ledger.persist(path)
    back = Ledger.load(path)
    assert back.serialize() == ledger.serialize()
    assert [s.digest for s in back.chain] == [s.digest for s in ledger.chain]
    assert back.status == ledger.status


def test_load_failures(tmp_path):
    ledger = random_ledger(random.Random(5))
    path = tmp_path / "x.wledger"
    ledger.persist(path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CorruptFile):
        Ledger.load(path)
    path.write_bytes(b"")
    with pytest.raises(CorruptFile):
        Ledger.load(path)
    with pytest.raises(IoFailure):
        Ledger.load("")
    with pytest.raises(IoFailure):
        Ledger.load(tmp_path / "missing")
    with pytest.raises(IoFailure):
        ledger.persist(os.path.join(tmp_path, "no", "such", "dir"))


def _closure(coords, before):
    reach = {a: {b for b in coords if before[a, b]} for a in coords}
    changed = True
    while changed:
        changed = False
        for a in coords:
            extra = set().union(*(reach[b] for b in reach[a])) - reach[a]
            if extra:
                reach[a] |= extra
                changed = True
    return reach


@pytest.mark.parametrize("seed", [1, 2, 7])
def test_relative_order_is_strict_partial_order(seed):
    ledger = run_scenario(scenario(seed=seed, messages=16)).ledgers[seed % 4]
    coords = sorted(c for c in ledger.known if c.seq > 0 and ledger.resolve(c) == c
                    and ledger.status.get(c, StateStatus.PROVISIONAL).live)
    assert len(coords) > 8
    order = {(a, b): ledger.relative_order(a, b) for a, b in itertools.product(coords, repeat=2)}
    before = {k: v is Order.BEFORE for k, v in order.items()}
    for a in coords:
        assert order[a, a] is Order.UNRELATED
    for a, b in itertools.product(coords, repeat=2):
        assert before[a, b] == (order[b, a] is Order.AFTER)
        assert not (before[a, b] and before[b, a])
    # the relation equals its own transitive closure
    reach = _closure(coords, before)
    for a in coords:
        assert reach[a] == {b for b in coords if before[a, b]}


def test_snapshot_lists_every_peer():
    ledger = Ledger(2, 7)
    snap = ledger.snapshot()
    assert [e.peer for e in snap] == [0, 1, 3, 4, 5, 6]
    assert all(e == SnapshotEntry(e.peer, 0, genesis_digest(e.peer)) for e in snap)
