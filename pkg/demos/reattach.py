"""Node 3 shows node 1 a different version of its first state than it shows
nodes 0 and 2. Node 1 builds on the odd version, the others refuse it, and
node 1 repairs its view and reattaches the message at the end of its chain.

Run: python3 demos/reattach.py
"""

from collections import deque

from wchain.codec import KeyedHashScheme, genesis_digest
from wchain.consensus import CLIENT, Engine, EngineConfig, build_preprepare
from wchain.ledger import ClientMessage, Coordinate

HONEST = (0, 1, 2)


def make_engines(n=4):
    scheme = KeyedHashScheme()
    keys = {i: scheme.keygen(0, i) for i in range(n)}
    publics = {i: k.public for i, k in keys.items()}
    return [Engine(EngineConfig(n, 1, i, keys[i], publics, retry_bound=1, timeout_ticks=300, scheme=scheme))
            for i in range(n)]


def deliver(nodes, sends, now=0):
    """Synchronous delivery among the honest nodes; node 3 hears nothing."""
    queue, replies = deque(sends), []
    while queue:
        src, send = queue.popleft()
        dsts = [send.dst] if send.dst is not None else [d for d in HONEST if d != src]
        for dst in dsts:
            if dst == CLIENT:
                replies.append(send.msg)
            elif dst in HONEST:
                queue.extend((dst, out) for out in nodes[dst].handle(send.msg, now))
    return replies


def short(digest: bytes) -> str:
    return digest.hex()[:8]


def main() -> None:
    nodes = make_engines()
    e0, e1, e2, e3 = nodes
    key, scheme = e3.config.keypair, e3.config.scheme
    version_a = build_preprepare(key, scheme, ClientMessage(7, 1, b"A"), 1, 0, genesis_digest(3), e3.ledger.snapshot())
    version_b = build_preprepare(key, scheme, ClientMessage(7, 1, b"B"), 1, 0, genesis_digest(3), e3.ledger.snapshot())
    print(f"node 3 signs two states at 3:1: A={short(version_a.state.digest)} B={short(version_b.state.digest)}")
    deliver(nodes, [(0, s) for s in e0.on_preprepare(version_a, 0)] + [(2, s) for s in e2.on_preprepare(version_a, 0)])
    deliver(nodes, [(1, s) for s in e1.on_preprepare(version_b, 0)])
    print("nodes 0 and 2 hold A, node 1 holds B")

    msg = ClientMessage(9, 1, b"pay 5")
    deliver(nodes, [(1, s) for s in e1.on_client_request(msg, 0)])
    first = e1.ledger.chain[0]
    print(f"node 1 appends 1:1 referencing 3:1={short(first.snapshot[-1].digest)}")
    print(f"refusals on the conflict check: node 0 {e0.stats['abort_d']}, node 2 {e2.stats['abort_d']}")

    replies, now = [], 0
    while not replies:
        now += 1
        for key_, value in e1.take_notes():
            if key_ in ("retry", "pull", "adopt", "supersede"):
                print(f"  tick {now - 1:3d} node 1 {key_} {value[:24]}")
        replies = deliver(nodes, [(1, s) for s in e1.on_tick(now)], now)
    for key_, value in e1.take_notes():
        if key_ in ("retry", "pull", "adopt", "supersede"):
            print(f"  tick {now:3d} node 1 {key_} {value[:24]}")

    reply = replies[0]
    new = e1.ledger.state_at(reply.coord)
    print(f"tick {now}: client told {reply.outcome.name} at {reply.coord}")
    print(f"1:1 now resolves to {e1.ledger.resolve(Coordinate(1, 1))}; "
          f"it references 3:1={short(new.snapshot[-1].digest)} like everyone else")


if __name__ == "__main__":
    main()
