"""Shared builders for the test suite."""

import random
from fractions import Fraction

from wchain.codec import KeyedHashScheme, genesis_digest
from wchain.config import ScenarioConfig
from wchain.consensus import Engine, EngineConfig, build_preprepare
from wchain.ledger import ClientMessage, Ledger, StateStatus


def scenario(n=4, seed=1, messages=40, **kw):
    f = (n - 1) // 3
    rate = kw.pop("arrival_rate", Fraction(1, 2))
    duration = kw.pop("duration_ticks", int(Fraction(messages) / rate))
    return ScenarioConfig(n=n, f=f, seed=seed, arrival_rate=Fraction(rate), duration_ticks=duration, **kw)


def engines(n=4, retry_bound=3, timeout_ticks=200, seed=0):
    scheme = KeyedHashScheme()
    f = (n - 1) // 3
    keys = {i: scheme.keygen(seed, i) for i in range(n)}
    publics = {i: k.public for i, k in keys.items()}
    return [
        Engine(EngineConfig(n, f, i, keys[i], publics, retry_bound=retry_bound,
                            timeout_ticks=timeout_ticks, scheme=scheme))
        for i in range(n)
    ]


def random_ledger(rng: random.Random, n=4, owner=0, max_states=12) -> Ledger:
    """A ledger with a random own chain, random statuses and random remote heads."""
    scheme = KeyedHashScheme()
    keys = {i: scheme.keygen(rng.randrange(1 << 30), i) for i in range(n)}
    ledger = Ledger(owner, n)
    for seq_no in range(1, rng.randint(0, max_states) + 1):
        msg = ClientMessage(rng.randrange(8), rng.randrange(1 << 20), rng.randbytes(rng.randint(0, 40)))
        parent_seq, parent_digest = ledger.head()
        pp = build_preprepare(keys[owner], scheme, msg, seq_no, parent_seq, parent_digest, ledger.snapshot())
        ledger.append_local(pp.state)
        roll = rng.random()
        if roll < 0.5:
            ledger.set_status(pp.state.coord, StateStatus.PREPARED)
            ledger.set_status(pp.state.coord, StateStatus.COMMITTED)
        elif roll < 0.6:
            ledger.set_status(pp.state.coord, StateStatus.ABORTED)
    for peer in range(n):
        if peer == owner or rng.random() < 0.3:
            continue
        depth = rng.randint(1, 5)
        parent_seq, parent_digest = 0, genesis_digest(peer)
        for seq_no in range(1, depth + 1):
            msg = ClientMessage(peer, seq_no, rng.randbytes(8))
            pp = build_preprepare(keys[peer], scheme, msg, seq_no, parent_seq, parent_digest, ())
            parent_seq, parent_digest = seq_no, pp.state.digest
        ledger.update_remote(peer, pp.state)
        if rng.random() < 0.5:
            ledger.set_status(pp.state.coord, StateStatus.COMMITTED)
    return ledger
