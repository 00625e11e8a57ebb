import hashlib
import random

import pytest
from hypothesis import given, strategies as st

from wchain.codec import (
    DecodeError,
    Ed25519Scheme,
    KeyedHashScheme,
    Reader,
    Signature,
    Tag,
    blob,
    canonical_decode,
    canonical_encode,
    genesis_digest,
    hash_bytes,
    seq,
    u64,
)
from wchain.ledger import ClientMessage, Coordinate, Reference, SnapshotEntry, State
from wchain.messages import Prepare

digests = st.binary(min_size=32, max_size=32)
small = st.integers(min_value=0, max_value=2**64 - 1)


def test_primitive_layout():
    assert blob(b"") == bytes(8)
    assert u64(1) == bytes.fromhex("0000000000000001")
    assert seq([]) == bytes(8)
    assert seq([b"\x01", b"\x02\x03"]) == u64(2) + b"\x01\x02\x03"
    with pytest.raises(ValueError):
        u64(-1)
    with pytest.raises(ValueError):
        u64(2**64)


def test_prepare_layout_by_hand():
    p = Prepare(Coordinate(2, 1), bytes(32), sender=3)
    by_hand = (
        bytes([0x04])
        + (2).to_bytes(8, "big")
        + (1).to_bytes(8, "big")
        + (32).to_bytes(8, "big")
        + bytes(32)
    )
    assert len(by_hand) == 57
    assert p.body[:57] == by_hand
    # the sender id closes the signed body
    assert p.body[57:] == (3).to_bytes(8, "big")
    assert len(p.body) == 65


def test_hash_is_sha256():
    assert hash_bytes(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert genesis_digest(5) == hashlib.sha256(b"\xff" + (5).to_bytes(8, "big")).digest()


def test_no_collisions_in_corpus():
    corpus = {i.to_bytes(4, "big") for i in range(10_000)}
    assert len({hash_bytes(x) for x in corpus}) == len(corpus)


def test_reader_rejects_bad_input():
    with pytest.raises(DecodeError):
        Reader(b"\x00\x01").u64()
    with pytest.raises(DecodeError):
        Reader(bytes([Tag.PREPARE])).tag(Tag.STATE)
    with pytest.raises(DecodeError):
        Reader(u64(1000) + b"x").count()
    with pytest.raises(DecodeError):
        Reader(blob(b"short")).digest()
    with pytest.raises(DecodeError):
        canonical_decode(b"\x7f")
    ref = Reference(Coordinate(0, 1), Coordinate(1, 0), bytes(32), bytes(32))
    with pytest.raises(DecodeError):
        canonical_decode(canonical_encode(ref) + b"\x00")


@st.composite
def states(draw):
    n_snap = draw(st.integers(0, 4))
    snap = tuple(
        SnapshotEntry(draw(st.integers(0, 20)), draw(st.integers(0, 1000)), draw(digests))
        for _ in range(n_snap)
    )
    sup = draw(st.none() | st.builds(Coordinate, st.integers(0, 20), st.integers(1, 1000)))
    return State(
        Coordinate(draw(st.integers(0, 20)), draw(st.integers(1, 10**6))),
        draw(digests), draw(digests), draw(st.integers(0, 10**6)), draw(digests), snap, sup,
    )


@given(states())
def test_state_round_trip(state):
    data = canonical_encode(state)
    back = canonical_decode(data)
    assert back == state
    assert hash_bytes(data) == state.digest == back.digest


@given(states(), states())
def test_state_encoding_is_injective(a, b):
    if a != b:
        assert canonical_encode(a) != canonical_encode(b)


@given(small, small, st.binary(max_size=64))
def test_client_message_round_trip(client, ts, payload):
    msg = ClientMessage(client, ts, payload)
    back = canonical_decode(canonical_encode(msg))
    assert back == msg and back.id == msg.id


@given(st.binary(max_size=80), small)
def test_signature_round_trip(sig_bytes, signer):
    sig = Signature(sig_bytes, signer)
    assert canonical_decode(canonical_encode(sig)) == sig


def test_keyed_hash_scheme():
    scheme = KeyedHashScheme()
    assert scheme.keygen(7, 0) == scheme.keygen(7, 0)
    k0, k1 = scheme.keygen(7, 0), scheme.keygen(7, 1)
    assert k0.public != k1.public
    rng = random.Random(1)
    for _ in range(100):
        msg = rng.randbytes(rng.randint(0, 64))
        sig = scheme.sign(k0, msg)
        assert scheme.verify(k0.public, msg, sig)
        assert not scheme.verify(k1.public, msg, sig)
        if msg:
            bit = rng.randrange(len(msg) * 8)
            flipped = bytearray(msg)
            flipped[bit // 8] ^= 1 << (bit % 8)
            assert not scheme.verify(k0.public, bytes(flipped), sig)
    # a key this instance never issued cannot verify
    assert not KeyedHashScheme().verify(k0.public, b"m", scheme.sign(k0, b"m"))


def test_forged_signature_bytes_do_not_transfer():
    scheme = KeyedHashScheme()
    key = scheme.keygen(1, 2)
    sig = scheme.sign(key, b"original")
    assert scheme.verify(key.public, b"original", sig)
    assert not scheme.verify(key.public, b"forged", sig)


def test_ed25519_scheme():
    pytest.importorskip("cryptography")
    scheme = Ed25519Scheme()
    k0, k1 = scheme.keygen(7, 0), scheme.keygen(7, 1)
    assert scheme.keygen(7, 0) == k0
    sig = scheme.sign(k0, b"hello")
    assert scheme.verify(k0.public, b"hello", sig)
    assert not scheme.verify(k0.public, b"hellp", sig)
    assert not scheme.verify(k1.public, b"hello", sig)
