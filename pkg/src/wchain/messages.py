"""Consensus message variants and their wire encodings.

Every variant has an unsigned ``body`` (what the sender signs) and a wire
form ``encode() == body + signature``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Optional, Tuple, Union

from .codec import (
    EMPTY_SIGNATURE,
    KeyPair,
    Reader,
    Signature,
    SignatureScheme,
    Tag,
    blob,
    hash_bytes,
    register_decoder,
    seq,
    u64,
)
from .ledger import ClientMessage, Coordinate, Reference, State
from .merkle import ProofBundle


class Outcome(IntEnum):
    COMMITTED = 0
    FAILURE = 1
    TIMEOUT = 2


def _state_wire(state: State) -> bytes:
    return state.body + state.signature.encode()


def _read_state_wire(reader: Reader) -> State:
    state = State.read(reader)
    return state.with_signature(Signature.read(reader))


class _Signed:
    sig: Signature

    @cached_property
    def body(self) -> bytes:
        return self._body()

    def _body(self) -> bytes:
        raise NotImplementedError

    def encode(self) -> bytes:
        return self.body + self.sig.encode()

    @cached_property
    def wire_id(self) -> bytes:
        return hash_bytes(self.encode())


@dataclass(frozen=True, eq=True)
class PrePrepare(_Signed):
    msg: ClientMessage
    sn: int
    state: State
    proof: ProofBundle
    refs: Tuple[Reference, ...]
    sender: int
    sig: Signature = EMPTY_SIGNATURE

    def _body(self) -> bytes:
        return (
            bytes([Tag.PREPREPARE])
            + self.msg.encode()
            + u64(self.sn)
            + _state_wire(self.state)
            + self.proof.encode()
            + seq(r.encode() for r in self.refs)
            + u64(self.sender)
        )

    @staticmethod
    def read(reader: Reader) -> "PrePrepare":
        reader.tag(Tag.PREPREPARE)
        msg = ClientMessage.read(reader)
        sn = reader.u64()
        state = _read_state_wire(reader)
        proof = ProofBundle.read(reader)
        refs = tuple(Reference.read(reader) for _ in range(reader.count()))
        sender = reader.u64()
        return PrePrepare(msg, sn, state, proof, refs, sender, Signature.read(reader))


@dataclass(frozen=True, eq=True)
class Prepare(_Signed):
    coord: Coordinate
    digest: bytes
    sender: int
    sig: Signature = EMPTY_SIGNATURE
    TAG = Tag.PREPARE

    def _body(self) -> bytes:
        return (
            bytes([self.TAG])
            + u64(self.coord.chain) + u64(self.coord.seq)
            + blob(self.digest)
            + u64(self.sender)
        )

    @classmethod
    def read(cls, reader: Reader):
        reader.tag(cls.TAG)
        coord = Coordinate(reader.u64(), reader.u64())
        digest = reader.digest()
        sender = reader.u64()
        return cls(coord, digest, sender, Signature.read(reader))


@dataclass(frozen=True, eq=True)
class Commit(Prepare):
    TAG = Tag.COMMIT


@dataclass(frozen=True, eq=True)
class PullRequest(_Signed):
    """Ask peers for their newest states, plus their states at ``coords``."""

    sender: int
    coords: Tuple[Coordinate, ...] = ()
    sig: Signature = EMPTY_SIGNATURE

    def _body(self) -> bytes:
        return (
            bytes([Tag.PULL_REQUEST])
            + u64(self.sender)
            + seq(u64(c.chain) + u64(c.seq) for c in self.coords)
        )

    @staticmethod
    def read(reader: Reader) -> "PullRequest":
        reader.tag(Tag.PULL_REQUEST)
        sender = reader.u64()
        coords = tuple(Coordinate(reader.u64(), reader.u64()) for _ in range(reader.count()))
        return PullRequest(sender, coords, Signature.read(reader))


@dataclass(frozen=True, eq=True)
class PullResponse(_Signed):
    """The responder's own head, its latest-remote-state table and any
    requested states it holds."""

    sender: int
    states: Tuple[State, ...]
    sig: Signature = EMPTY_SIGNATURE

    def _body(self) -> bytes:
        return bytes([Tag.PULL_RESPONSE]) + u64(self.sender) + seq(_state_wire(s) for s in self.states)

    @staticmethod
    def read(reader: Reader) -> "PullResponse":
        reader.tag(Tag.PULL_RESPONSE)
        sender = reader.u64()
        states = tuple(_read_state_wire(reader) for _ in range(reader.count()))
        return PullResponse(sender, states, Signature.read(reader))


@dataclass(frozen=True, eq=True)
class ClientReply(_Signed):
    msg_id: bytes
    outcome: Outcome
    coord: Optional[Coordinate]
    sender: int
    sig: Signature = EMPTY_SIGNATURE

    def _body(self) -> bytes:
        coord = [] if self.coord is None else [u64(self.coord.chain) + u64(self.coord.seq)]
        return (
            bytes([Tag.CLIENT_REPLY])
            + blob(self.msg_id)
            + u64(int(self.outcome))
            + seq(coord)
            + u64(self.sender)
        )

    @staticmethod
    def read(reader: Reader) -> "ClientReply":
        reader.tag(Tag.CLIENT_REPLY)
        msg_id = reader.digest()
        outcome = Outcome(reader.u64())
        coords = [Coordinate(reader.u64(), reader.u64()) for _ in range(reader.count())]
        sender = reader.u64()
        return ClientReply(msg_id, outcome, coords[0] if coords else None, sender, Signature.read(reader))


ConsensusMsg = Union[PrePrepare, Prepare, Commit, PullRequest, PullResponse, ClientReply]


def signed(msg, keypair: KeyPair, scheme: SignatureScheme):
    """Return ``msg`` carrying the sender's signature over its body."""
    sig = scheme.sign(keypair, msg.body)
    out = object.__new__(type(msg))
    out.__dict__.update(msg.__dict__)  # keeps the cached body
    out.__dict__.pop("wire_id", None)
    object.__setattr__(out, "sig", sig)
    return out


def sign_state(state: State, keypair: KeyPair, scheme: SignatureScheme) -> State:
    return state.with_signature(scheme.sign(keypair, state.body))


register_decoder(Tag.PREPREPARE, PrePrepare.read)
register_decoder(Tag.PREPARE, Prepare.read)
register_decoder(Tag.COMMIT, Commit.read)
register_decoder(Tag.PULL_REQUEST, PullRequest.read)
register_decoder(Tag.PULL_RESPONSE, PullResponse.read)
register_decoder(Tag.CLIENT_REPLY, ClientReply.read)
