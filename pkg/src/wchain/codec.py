"""Canonical byte encoding, hashing and signatures.

Wire layout (the bit-exact contract for hashing and signing):

* every object starts with a one-byte type tag (see ``Tag``);
* fields follow in declaration order;
* unsigned integers are 8-byte big-endian;
* byte strings (digests, payloads, signature bytes) are an 8-byte
  big-endian length prefix followed by the bytes;
* lists are an 8-byte big-endian element count followed by the
  concatenated element encodings;
* nested objects are inlined with their own tag byte;
* an optional field is a list of zero or one elements.

Signatures come from a pluggable ``SignatureScheme``. The default is a
keyed-hash scheme, cheap and deterministic, suitable for a simulator that
owns every key. ``Ed25519Scheme`` is available when real signatures are
wanted.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Dict, Iterable, Protocol, Tuple

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

_U64 = struct.Struct(">Q")
_MASK64 = (1 << 64) - 1


class Tag(IntEnum):
    STATE = 0x01
    REFERENCE = 0x02
    PREPREPARE = 0x03
    PREPARE = 0x04
    COMMIT = 0x05
    PULL_REQUEST = 0x06
    PULL_RESPONSE = 0x07
    CLIENT_REPLY = 0x08
    CLIENT_MESSAGE = 0x09
    STATE_RECORD = 0x0A
    SIGNATURE = 0x0B
    INCLUSION_PROOF = 0x0C
    PROOF_BUNDLE = 0x0D


class DecodeError(ValueError):
    pass


def u64(value: int) -> bytes:
    if not 0 <= value <= _MASK64:
        raise ValueError(f"not an unsigned 64-bit integer: {value}")
    return _U64.pack(value)


def blob(data: bytes) -> bytes:
    return _U64.pack(len(data)) + data


def seq(encoded_items: Iterable[bytes]) -> bytes:
    items = list(encoded_items)
    return _U64.pack(len(items)) + b"".join(items)


class Reader:
    """Cursor over a canonical encoding."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def _take(self, size: int) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise DecodeError("truncated input")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def tag(self, expected: Tag) -> None:
        got = self._take(1)[0]
        if got != expected:
            raise DecodeError(f"expected tag {expected:#04x}, got {got:#04x}")

    def peek_tag(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("truncated input")
        return self.data[self.pos]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u64())

    def digest(self) -> bytes:
        value = self.blob()
        if len(value) != DIGEST_SIZE:
            raise DecodeError("digest must be 32 bytes")
        return value

    def count(self) -> int:
        n = self.u64()
        # every element needs at least one byte; reject absurd counts early
        if n > len(self.data) - self.pos:
            raise DecodeError("list count exceeds remaining input")
        return n

    def at_end(self) -> bool:
        return self.pos == len(self.data)


# -- object registry --------------------------------------------------------

_DECODERS: Dict[int, Callable[[Reader], object]] = {}


def register_decoder(tag: Tag, fn: Callable[[Reader], object]) -> None:
    _DECODERS[int(tag)] = fn


def canonical_encode(obj) -> bytes:
    """Canonical encoding of any protocol object.

    Protocol types implement ``encode()``; for signed objects that is the
    full wire form, and ``hash(canonical_encode(state)) == state.digest``
    because a State's canonical form is its unsigned body.
    """
    return obj.encode()


def read_object(reader: Reader):
    tag = reader.peek_tag()
    try:
        fn = _DECODERS[tag]
    except KeyError:
        raise DecodeError(f"unknown tag {tag:#04x}") from None
    return fn(reader)


def canonical_decode(data: bytes):
    reader = Reader(data)
    obj = read_object(reader)
    if not reader.at_end():
        raise DecodeError("trailing bytes after object")
    return obj


# -- hashing ------------------------------------------------------------------

def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def genesis_digest(chain: int) -> bytes:
    return hash_bytes(b"\xff" + u64(chain))


# -- signatures -----------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes
    owner: int


@dataclass(frozen=True)
class Signature:
    bytes: bytes
    signer: int

    def encode(self) -> bytes:
        return bytes([Tag.SIGNATURE]) + u64(self.signer) + blob(self.bytes)

    @staticmethod
    def read(reader: Reader) -> "Signature":
        reader.tag(Tag.SIGNATURE)
        signer = reader.u64()
        return Signature(reader.blob(), signer)


EMPTY_SIGNATURE = Signature(b"", 0)


class SignatureScheme(Protocol):
    name: str

    def keygen(self, seed: int, owner: int) -> KeyPair: ...

    def sign(self, keypair: KeyPair, msg: bytes) -> Signature: ...

    def verify(self, public: bytes, msg: bytes, sig: Signature) -> bool: ...


class KeyedHashScheme:
    """sign = H(secret || msg); verify recomputes from the key registry.

    Only meaningful when one party (the simulator) generated every key; a
    public key nobody generated through this instance never verifies.
    """

    name = "keyed-sha256"

    def __init__(self) -> None:
        self._secrets: Dict[bytes, bytes] = {}
        # every receiver verifies the same signed object; remember recent answers
        self._checked: Dict[Tuple[bytes, bytes, bytes], bool] = {}

    def keygen(self, seed: int, owner: int) -> KeyPair:
        secret = hash_bytes(b"wchain-sk" + u64(seed & _MASK64) + u64(owner))
        public = hash_bytes(b"wchain-pk" + secret)
        self._secrets[public] = secret
        return KeyPair(secret, public, owner)

    def sign(self, keypair: KeyPair, msg: bytes) -> Signature:
        return Signature(hash_bytes(keypair.secret + msg), keypair.owner)

    def verify(self, public: bytes, msg: bytes, sig: Signature) -> bool:
        secret = self._secrets.get(public)
        if secret is None or not isinstance(sig.bytes, bytes):
            return False
        key = (public, msg, sig.bytes)
        ok = self._checked.get(key)
        if ok is None:
            ok = len(sig.bytes) == DIGEST_SIZE and hash_bytes(secret + msg) == sig.bytes
            if len(self._checked) >= 65536:
                self._checked.clear()
            self._checked[key] = ok
        return ok


class Ed25519Scheme:
    """Real signatures via ``cryptography``; keys derived from (seed, owner)."""

    name = "ed25519"

    def keygen(self, seed: int, owner: int) -> KeyPair:
        from cryptography.hazmat.primitives import serialization
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        secret = hash_bytes(b"wchain-ed25519" + u64(seed & _MASK64) + u64(owner))
        key = Ed25519PrivateKey.from_private_bytes(secret)
        public = key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(secret, public, owner)

    def sign(self, keypair: KeyPair, msg: bytes) -> Signature:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        key = Ed25519PrivateKey.from_private_bytes(keypair.secret)
        return Signature(key.sign(msg), keypair.owner)

    def verify(self, public: bytes, msg: bytes, sig: Signature) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

        try:
            Ed25519PublicKey.from_public_bytes(public).verify(sig.bytes, msg)
        except (InvalidSignature, ValueError, TypeError):
            return False
        return True


DEFAULT_SCHEME = KeyedHashScheme()


def keygen(seed: int, owner: int) -> KeyPair:
    return DEFAULT_SCHEME.keygen(seed, owner)


def sign(keypair: KeyPair, msg: bytes) -> Signature:
    return DEFAULT_SCHEME.sign(keypair, msg)


def verify(public: bytes, msg: bytes, sig: Signature) -> bool:
    return DEFAULT_SCHEME.verify(public, msg, sig)


register_decoder(Tag.SIGNATURE, Signature.read)

__all__ = [
    "DIGEST_SIZE", "ZERO_DIGEST", "Tag", "DecodeError", "Reader", "u64", "blob", "seq",
    "canonical_encode", "canonical_decode", "read_object", "register_decoder",
    "hash_bytes", "genesis_digest", "KeyPair", "Signature", "EMPTY_SIGNATURE",
    "SignatureScheme", "KeyedHashScheme", "Ed25519Scheme", "DEFAULT_SCHEME",
    "keygen", "sign", "verify",
]
