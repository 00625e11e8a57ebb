"""Per-block Merkle tree over the client message and the remote snapshot.

Leaves are ``[message_hash] + remote_state_digests`` (peers by ascending
id). A leaf is absorbed as ``H(0x00 || leaf)``, an inner node as
``H(0x01 || left || right)``; an odd node at the end of a level is paired
with itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

from .codec import DIGEST_SIZE, Reader, Tag, blob, hash_bytes, register_decoder, seq, u64

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"


class IndexOutOfRange(IndexError):
    pass


def leaf_hash(leaf: bytes) -> bytes:
    return hash_bytes(LEAF_PREFIX + leaf)


def node_hash(left: bytes, right: bytes) -> bytes:
    return hash_bytes(NODE_PREFIX + left + right)


@dataclass(frozen=True)
class MerkleTree:
    leaves: Tuple[bytes, ...]
    levels: Tuple[Tuple[bytes, ...], ...]

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def height(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return len(self.leaves)


def tree_from_leaves(leaves: Sequence[bytes]) -> MerkleTree:
    if not leaves:
        raise ValueError("a Merkle tree needs at least one leaf")
    level = tuple(leaf_hash(x) for x in leaves)
    levels = [level]
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level), 2):
            left = level[i]
            right = level[i + 1] if i + 1 < len(level) else left
            nxt.append(node_hash(left, right))
        level = tuple(nxt)
        levels.append(level)
    return MerkleTree(tuple(leaves), tuple(levels))


def build_tree(message_hash: bytes, remote_states: Sequence[bytes]) -> MerkleTree:
    return tree_from_leaves([message_hash, *remote_states])


@dataclass(frozen=True)
class InclusionProof:
    leaf_index: int
    # (sibling digest, sibling_is_left)
    siblings: Tuple[Tuple[bytes, bool], ...] = ()

    def encode(self) -> bytes:
        return (
            bytes([Tag.INCLUSION_PROOF])
            + u64(self.leaf_index)
            + seq(u64(int(left)) + blob(d) for d, left in self.siblings)
        )

    @staticmethod
    def read(reader: Reader) -> "InclusionProof":
        reader.tag(Tag.INCLUSION_PROOF)
        index = reader.u64()
        sibs = []
        for _ in range(reader.count()):
            left = reader.u64()
            sibs.append((reader.digest(), bool(left)))
        return InclusionProof(index, tuple(sibs))


def prove(tree: MerkleTree, leaf_index: int) -> InclusionProof:
    if not 0 <= leaf_index < len(tree.leaves):
        raise IndexOutOfRange(f"leaf {leaf_index} not in tree of {len(tree.leaves)}")
    sibs = []
    idx = leaf_index
    for level in tree.levels[:-1]:
        sib = idx ^ 1
        if sib >= len(level):
            sib = idx
        sibs.append((level[sib], sib < idx))
        idx //= 2
    return InclusionProof(leaf_index, tuple(sibs))


def verify_proof(root: bytes, leaf: bytes, proof: InclusionProof) -> bool:
    try:
        node = leaf_hash(leaf)
        idx = proof.leaf_index
        for sibling, is_left in proof.siblings:
            if len(sibling) != DIGEST_SIZE:
                return False
            # side flag must agree with the index bit; a duplicated odd node
            # always has an even index, so it pairs on the right
            if is_left != bool(idx & 1):
                return False
            node = node_hash(sibling, node) if is_left else node_hash(node, sibling)
            idx //= 2
        return idx == 0 and node == root
    except (TypeError, AttributeError, ValueError):
        return False


@dataclass(frozen=True)
class ProofBundle:
    """P_M, P_B and P_S for one State.

    ``p_b`` is the chain-extension link (parent seq, parent digest); it is
    checked against the verifier's record of the proposer's chain.
    """

    p_m: InclusionProof
    parent_seq: int
    parent_digest: bytes
    p_s: Tuple[InclusionProof, ...] = field(default=())

    @property
    def p_b(self) -> Tuple[int, bytes]:
        return self.parent_seq, self.parent_digest

    def encode(self) -> bytes:
        return (
            bytes([Tag.PROOF_BUNDLE])
            + self.p_m.encode()
            + u64(self.parent_seq)
            + blob(self.parent_digest)
            + seq(p.encode() for p in self.p_s)
        )

    @staticmethod
    def read(reader: Reader) -> "ProofBundle":
        reader.tag(Tag.PROOF_BUNDLE)
        p_m = InclusionProof.read(reader)
        parent_seq = reader.u64()
        parent_digest = reader.digest()
        p_s = tuple(InclusionProof.read(reader) for _ in range(reader.count()))
        return ProofBundle(p_m, parent_seq, parent_digest, p_s)


def make_bundle(tree: MerkleTree, parent_seq: int, parent_digest: bytes) -> ProofBundle:
    p_s = tuple(prove(tree, i) for i in range(1, len(tree.leaves)))
    return ProofBundle(prove(tree, 0), parent_seq, parent_digest, p_s)


def verify_bundle(
    bundle: ProofBundle,
    root: bytes,
    message_hash: bytes,
    remote_states: Sequence[bytes],
) -> Tuple[bool, str]:
    """Check P_M and P_S against ``root``. Returns (ok, failing part)."""
    if bundle.p_m.leaf_index != 0 or not verify_proof(root, message_hash, bundle.p_m):
        return False, "p_m"
    if len(bundle.p_s) != len(remote_states):
        return False, "p_s"
    for i, (proof, digest) in enumerate(zip(bundle.p_s, remote_states), start=1):
        if proof.leaf_index != i or not verify_proof(root, digest, proof):
            return False, "p_s"
    return True, ""


register_decoder(Tag.INCLUSION_PROOF, InclusionProof.read)
register_decoder(Tag.PROOF_BUNDLE, ProofBundle.read)

__all__ = [
    "MerkleTree", "InclusionProof", "ProofBundle", "IndexOutOfRange",
    "build_tree", "tree_from_leaves", "prove", "verify_proof", "make_bundle",
    "verify_bundle", "leaf_hash", "node_hash",
]
