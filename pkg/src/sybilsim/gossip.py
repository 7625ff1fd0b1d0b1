"""Signed model-history gossip: databases, selection, wire format, inference.

Each node keeps one history record per known origin and forwards a
randomly selected record to every neighbor each round, preferring records
gathered close by.  Receivers recover a sender's trained model as the
difference of its two most recent histories, which removes the need to
transmit raw models at all.

Wire layout, little-endian throughout (golden-tested):
    block   = u32 origin | u32 round | u32 vec_len | f64 * vec_len | u16 sig_len | sig
    message = own block | flag u8 | [gossip block | u32 gossip_distance] when flag = 1
The signature covers the block minus its signature fields: origin, round,
length, then the raw history values.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class MessageRejected(RuntimeError):
    """An incoming message failed verification and was discarded whole."""


class ComposeFailure(RuntimeError):
    """Signing or encoding failed while building an outgoing message."""


class WireFormatError(ValueError):
    """Bytes on the wire do not parse as a round message."""


@dataclass(frozen=True)
class HistoryRecord:
    """One stored history: who trained it, how it got here, and its proof.

    ``distance`` counts forwarding hops: 1 for a record taken straight from
    its origin, 0 reserved for a node's own bookkeeping entry.  The
    signature is the ORIGIN's, kept so the record can be forwarded onward
    without any ability to forge it.
    """

    origin: int
    history: np.ndarray
    round: int
    distance: int
    forwarder: int
    signature: bytes

    def __post_init__(self):
        object.__setattr__(
            self, "history", np.asarray(self.history, dtype=np.float64)
        )
        if self.history.ndim != 1:
            raise ValueError("history must be a 1-D vector")
        if self.distance < 0:
            raise ValueError("distance must be >= 0")
        if self.round < 0:
            raise ValueError("round must be >= 0")


@dataclass
class HistoryDB:
    """At most one record per origin; newest round wins."""

    capacity: Optional[int] = None
    records: Dict[int, HistoryRecord] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be >= 1 when set")

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SignedHistory:
    """A history vector bound to its origin and round by a signature."""

    history: np.ndarray
    origin: int
    round: int
    signature: bytes

    def __post_init__(self):
        object.__setattr__(
            self, "history", np.asarray(self.history, dtype=np.float64)
        )
        if self.history.ndim != 1:
            raise ValueError("history must be a 1-D vector")


@dataclass(frozen=True)
class RoundMessage:
    """What one node sends one neighbor in one round.

    ``gossiped`` relays some third node's signed history unchanged;
    ``gossip_distance`` is the relayed record's stored distance plus one.
    """

    own: SignedHistory
    gossiped: Optional[SignedHistory] = None
    gossip_distance: Optional[int] = None

    def __post_init__(self):
        if (self.gossiped is None) != (self.gossip_distance is None):
            raise ValueError("gossiped block and distance must appear together")
        if self.gossip_distance is not None and self.gossip_distance < 2:
            raise ValueError("a forwarded record has travelled at least two hops")


# --- signatures ------------------------------------------------------------


def sign_payload(history: np.ndarray, round_no: int, origin: int) -> bytes:
    """Canonical bytes a signature covers: ids, round, then raw values."""
    values = np.ascontiguousarray(history, dtype="<f8")
    return struct.pack("<III", origin, round_no, values.size) + values.tobytes()


class Blake2Scheme:
    """Keyed-hash stand-in for tests: same key signs and verifies."""

    name = "blake2"

    def keypair(self, seed_material: bytes):
        key = hashlib.blake2b(seed_material, digest_size=32).digest()
        return key, key

    def sign(self, private, payload: bytes) -> bytes:
        return hashlib.blake2b(payload, key=private, digest_size=32).digest()

    def verify(self, public, payload: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(public, payload), signature)


class Ed25519Scheme:
    """Real asymmetric signatures; the private key never leaves its node."""

    name = "ed25519"

    def keypair(self, seed_material: bytes):
        seed = hashlib.blake2b(seed_material, digest_size=32).digest()
        private = Ed25519PrivateKey.from_private_bytes(seed)
        return private, private.public_key()

    def sign(self, private: Ed25519PrivateKey, payload: bytes) -> bytes:
        return private.sign(payload)

    def verify(
        self, public: Ed25519PublicKey, payload: bytes, signature: bytes
    ) -> bool:
        try:
            public.verify(signature, payload)
            return True
        except InvalidSignature:
            return False


SCHEMES = {"blake2": Blake2Scheme, "ed25519": Ed25519Scheme}


def get_scheme(name: str):
    try:
        return SCHEMES[name]()
    except KeyError:
        raise ValueError(f"unknown signature scheme {name!r}") from None


@dataclass(frozen=True)
class Signer:
    """A node's signing identity."""

    scheme: object
    node_id: int
    private: object

    def sign(self, history: np.ndarray, round_no: int) -> bytes:
        return self.scheme.sign(
            self.private, sign_payload(history, round_no, self.node_id)
        )


@dataclass(frozen=True)
class Verifier:
    """Directory of public keys for checking any node's blocks."""

    scheme: object
    public_keys: Dict[int, object]

    def check(self, block: SignedHistory) -> bool:
        key = self.public_keys.get(block.origin)
        if key is None:
            return False
        payload = sign_payload(block.history, block.round, block.origin)
        return self.scheme.verify(key, payload, block.signature)


# --- database operations ---------------------------------------------------


def filter_db(db: HistoryDB, self_id: int, neighbor: int) -> List[HistoryRecord]:
    """Records eligible for gossip to ``neighbor``: nothing it already owns
    or forwarded here itself, and nothing of our own.  Stable origin order."""
    return [
        record
        for origin, record in sorted(db.records.items())
        if origin not in (self_id, neighbor) and record.forwarder != neighbor
    ]


def select_gossip(
    filtered: Sequence[HistoryRecord], lam: float, rng: np.random.Generator
) -> Optional[HistoryRecord]:
    """Pick one record at random, weighting distance d by lam * exp(-lam * d)."""
    if lam <= 0:
        raise ValueError("lam must be > 0")
    if not filtered:
        return None
    weights = np.array([lam * math.exp(-lam * r.distance) for r in filtered])
    return filtered[rng.choice(len(filtered), p=weights / weights.sum())]


def update_db(db: HistoryDB, incoming: HistoryRecord) -> str:
    """Insert or refresh one record; returns inserted / updated / ignored.

    Only a strictly newer round replaces an existing origin's record.  When
    a capacity is set, the stalest record by round (ties to the lowest
    origin id) is evicted after an insertion.
    """
    existing = db.records.get(incoming.origin)
    if existing is None:
        db.records[incoming.origin] = incoming
        if db.capacity is not None and len(db.records) > db.capacity:
            stalest = min(db.records, key=lambda o: (db.records[o].round, o))
            del db.records[stalest]
        return "inserted"
    if incoming.round > existing.round:
        db.records[incoming.origin] = incoming
        return "updated"
    return "ignored"


# --- message composition and receipt ---------------------------------------


def compose_message(
    self_history: np.ndarray,
    round_no: int,
    selected: Optional[HistoryRecord],
    signer: Signer,
) -> RoundMessage:
    """Build the outgoing message: own signed history plus one relayed record.

    The relayed block keeps the originator's signature; only the distance
    counter changes, incremented by one for this extra hop.  Raw trained
    models are never included.
    """
    try:
        signature = signer.sign(self_history, round_no)
    except Exception as exc:
        raise ComposeFailure(f"signing failed: {exc}") from exc
    own = SignedHistory(
        history=np.asarray(self_history, dtype=np.float64),
        origin=signer.node_id,
        round=round_no,
        signature=signature,
    )
    if selected is None:
        return RoundMessage(own=own)
    gossiped = SignedHistory(
        history=selected.history,
        origin=selected.origin,
        round=selected.round,
        signature=selected.signature,
    )
    return RoundMessage(own=own, gossiped=gossiped, gossip_distance=selected.distance + 1)


@dataclass(frozen=True)
class ReceiveResult:
    sender: int
    round: int
    history: np.ndarray
    trained_model: Optional[np.ndarray]
    db_changes: Dict[str, Optional[str]]


def infer_trained(
    prev_known: Optional[Tuple[int, np.ndarray]], round_no: int, history: np.ndarray
) -> Optional[np.ndarray]:
    """Trained model as the difference of two consecutive histories.

    Returns None when the previous known history is missing or more than
    one round behind; a later pair of consecutive rounds will recover the
    model stream."""
    if prev_known is None:
        return None
    prev_round, prev_history = prev_known
    if round_no != prev_round + 1:
        return None
    return history - prev_history


def receive_message(
    msg: RoundMessage,
    db: HistoryDB,
    prev_known: Optional[Tuple[int, np.ndarray]],
    keys: Verifier,
    self_id: Optional[int] = None,
) -> ReceiveResult:
    """Verify, store, and decode one incoming message.

    Both blocks must verify under their origins' public keys or the whole
    message is dropped, as is a message whose own block is older than what
    we already know about the sender.  The sender's fresh history enters
    the database at distance 1; the relayed record at its carried distance.
    """
    if not keys.check(msg.own):
        raise MessageRejected(f"own block from node {msg.own.origin} fails verification")
    if msg.gossiped is not None and not keys.check(msg.gossiped):
        raise MessageRejected(
            f"gossiped block from node {msg.gossiped.origin} fails verification"
        )
    if prev_known is not None and msg.own.round < prev_known[0]:
        raise MessageRejected(
            f"node {msg.own.origin} round {msg.own.round} regresses before {prev_known[0]}"
        )
    sender = msg.own.origin
    trained = infer_trained(prev_known, msg.own.round, msg.own.history)
    changes: Dict[str, Optional[str]] = {"own": None, "gossip": None}
    changes["own"] = update_db(
        db,
        HistoryRecord(
            origin=sender,
            history=msg.own.history,
            round=msg.own.round,
            distance=1,
            forwarder=sender,
            signature=msg.own.signature,
        ),
    )
    if msg.gossiped is not None and msg.gossiped.origin != self_id:
        changes["gossip"] = update_db(
            db,
            HistoryRecord(
                origin=msg.gossiped.origin,
                history=msg.gossiped.history,
                round=msg.gossiped.round,
                distance=msg.gossip_distance,
                forwarder=sender,
                signature=msg.gossiped.signature,
            ),
        )
    return ReceiveResult(
        sender=sender,
        round=msg.own.round,
        history=msg.own.history,
        trained_model=trained,
        db_changes=changes,
    )


# --- wire format -----------------------------------------------------------


def encode_block(block: SignedHistory) -> bytes:
    values = np.ascontiguousarray(block.history, dtype="<f8")
    if not 0 <= block.origin < 2 ** 32 or not 0 <= block.round < 2 ** 32:
        raise WireFormatError("origin and round must fit in u32")
    if len(block.signature) >= 2 ** 16:
        raise WireFormatError("signature too long for u16 length")
    return (
        struct.pack("<III", block.origin, block.round, values.size)
        + values.tobytes()
        + struct.pack("<H", len(block.signature))
        + block.signature
    )


def decode_block(buf: bytes, offset: int) -> Tuple[SignedHistory, int]:
    try:
        origin, round_no, length = struct.unpack_from("<III", buf, offset)
        offset += 12
        values = np.frombuffer(buf, dtype="<f8", count=length, offset=offset).copy()
        offset += 8 * length
        (sig_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        signature = bytes(buf[offset : offset + sig_len])
        if len(signature) != sig_len:
            raise ValueError("truncated signature")
        offset += sig_len
    except (struct.error, ValueError) as exc:
        raise WireFormatError(f"malformed block at byte {offset}: {exc}") from exc
    return SignedHistory(values, origin, round_no, signature), offset


def encode_message(msg: RoundMessage) -> bytes:
    out = encode_block(msg.own)
    if msg.gossiped is None:
        return out + b"\x00"
    return (
        out
        + b"\x01"
        + encode_block(msg.gossiped)
        + struct.pack("<I", msg.gossip_distance)
    )


def decode_message(buf: bytes) -> RoundMessage:
    own, offset = decode_block(buf, 0)
    if offset >= len(buf):
        raise WireFormatError("missing gossip flag byte")
    flag = buf[offset]
    offset += 1
    if flag == 0:
        if offset != len(buf):
            raise WireFormatError(f"{len(buf) - offset} trailing bytes")
        return RoundMessage(own=own)
    if flag != 1:
        raise WireFormatError(f"bad gossip flag {flag}")
    gossiped, offset = decode_block(buf, offset)
    try:
        (distance,) = struct.unpack_from("<I", buf, offset)
    except struct.error as exc:
        raise WireFormatError("truncated gossip distance") from exc
    offset += 4
    if offset != len(buf):
        raise WireFormatError(f"{len(buf) - offset} trailing bytes")
    return RoundMessage(own=own, gossiped=gossiped, gossip_distance=distance)
