"""Wire frames, weighted aggregation, and the key-blind aggregator role.

Frame layout (all little-endian):

    offset  size  field
    0       4     magic  b"SIFL"
    4       1     version (0x01)
    5       1     kind byte
    6       4     round index (u32)
    10      2     client id (u16; 0 means server or aggregator)
    12      8     payload length (u64)
    20      ...   payload

For every kind except KEYSET the length counts float64 values and the payload
is their little-endian bytes.  KEYSET carries the opaque key blob, so its
length counts raw bytes; the blob has its own magic and version and is never
reinterpreted as floats.

Per-kind payload schemas:

    HELLO      [dataset size]                 client announces itself
    KEYSET     raw key blob                   server -> clients via relay
    GLOBAL     [params...]                    broadcast model for the round
    UPDATE     [size, train_loss, params...]  client -> aggregator
    AGGREGATE  [train_loss, params...]        aggregator -> server
    DONE       []                             shutdown

The dataset size rides in every UPDATE because the weighted average needs it;
that the aggregator learns per-client dataset sizes is a documented leak of
this protocol.  The aggregator itself only ever touches encrypted vectors,
sizes, and scalar losses: nothing in its interface can produce plain model
parameters, and it holds no key material of any kind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .keys import EncryptedParamVector

__all__ = [
    "Message",
    "ClientState",
    "RoundRecord",
    "ProtocolError",
    "DecodeError",
    "MESSAGE_KINDS",
    "HEADER_SIZE",
    "encode_message",
    "decode_message",
    "weighted_average",
    "aggregate",
    "Aggregator",
]

FRAME_MAGIC = b"SIFL"
FRAME_VERSION = 1
HEADER_SIZE = 20

MESSAGE_KINDS = {"HELLO": 1, "KEYSET": 2, "GLOBAL": 3, "UPDATE": 4, "AGGREGATE": 5, "DONE": 6}
_KIND_NAMES = {v: k for k, v in MESSAGE_KINDS.items()}


class ProtocolError(RuntimeError):
    """Round-level protocol violation (missing client, mixed rounds, ...)."""


class DecodeError(ValueError):
    """Malformed frame; ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Message:
    """One protocol frame.  ``blob`` is used by KEYSET, ``payload`` by the rest."""

    kind: str
    round_index: int = 0
    client_id: int = 0
    payload: np.ndarray = field(default_factory=lambda: np.empty(0))
    blob: bytes = b""

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.kind == "KEYSET" and len(self.payload):
            raise ValueError("KEYSET frames carry a raw blob, not floats")
        if self.kind != "KEYSET" and self.blob:
            raise ValueError(f"{self.kind} frames carry floats, not a raw blob")


def encode_message(msg: Message) -> bytes:
    if msg.kind == "KEYSET":
        body = msg.blob
        length = len(body)
    else:
        body = np.ascontiguousarray(msg.payload, dtype="<f8").tobytes()
        length = len(msg.payload)
    header = struct.pack(
        "<4sBBIHQ",
        FRAME_MAGIC,
        FRAME_VERSION,
        MESSAGE_KINDS[msg.kind],
        msg.round_index,
        msg.client_id,
        length,
    )
    return header + body


def decode_message(data: bytes) -> Message:
    """Decode one full frame; trailing bytes are an error.

    Truncation errors point at the first missing byte, i.e. ``len(data)``.
    """
    if len(data) < HEADER_SIZE:
        raise DecodeError(f"frame truncated in header ({len(data)} bytes)", len(data))
    if data[:4] != FRAME_MAGIC:
        raise DecodeError(f"bad magic {data[:4]!r}", 0)
    if data[4] != FRAME_VERSION:
        raise DecodeError(f"unsupported version {data[4]}", 4)
    kind_byte = data[5]
    if kind_byte not in _KIND_NAMES:
        raise DecodeError(f"unknown kind byte {kind_byte}", 5)
    kind = _KIND_NAMES[kind_byte]
    round_index, client_id, length = struct.unpack_from("<IHQ", data, 6)
    body_len = length if kind == "KEYSET" else length * 8
    if len(data) < HEADER_SIZE + body_len:
        raise DecodeError(
            f"frame truncated in payload (expected {body_len} body bytes)", len(data)
        )
    if len(data) > HEADER_SIZE + body_len:
        raise DecodeError("trailing bytes after payload", HEADER_SIZE + body_len)
    if kind == "KEYSET":
        return Message(kind=kind, round_index=round_index, client_id=client_id,
                       blob=data[HEADER_SIZE:HEADER_SIZE + body_len])
    payload = np.frombuffer(data, dtype="<f8", count=length, offset=HEADER_SIZE)
    return Message(kind=kind, round_index=round_index, client_id=client_id, payload=payload)


@dataclass
class ClientState:
    """A participating client: unique id and its local labelled samples."""

    client_id: int
    dataset: tuple[np.ndarray, np.ndarray]

    @property
    def size(self) -> int:
        return len(self.dataset[0])


@dataclass
class RoundRecord:
    """Per-round metrics; ``equivalence_rel_err`` is filled in dual runs only."""

    round_index: int
    mode: str
    train_loss: float
    test_accuracy: float
    t_encrypt_ms: float = 0.0
    t_decrypt_ms: float = 0.0
    t_train_ms: float = 0.0
    equivalence_rel_err: float | None = None

    def validate(self) -> None:
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.test_accuracy} outside [0, 1]")
        if min(self.t_encrypt_ms, self.t_decrypt_ms, self.t_train_ms) < 0:
            raise ValueError("negative duration in round record")


def weighted_average(vectors: list[np.ndarray], sizes: list[int]) -> np.ndarray:
    """Dataset-size-weighted mean, computed as (sum size_i * v_i) / total.

    The weights sum to exactly one by construction, which is what lets the
    shared kernel mask survive aggregation with coefficient 1.
    """
    if len(vectors) != len(sizes) or not vectors:
        raise ValueError("need matching, non-empty vectors and sizes")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"all dataset sizes must be positive, got {sizes}")
    acc = np.zeros_like(vectors[0])
    for v, s in zip(vectors, sizes):
        acc += float(s) * v
    return acc / float(sum(sizes))


def aggregate(updates: list[EncryptedParamVector], sizes: list[int]) -> EncryptedParamVector:
    """Weighted average of encrypted updates, in the order given.

    Callers order updates by ascending client id so the float summation order
    is fixed regardless of arrival order.  All updates must share one round
    and one dimension.
    """
    if not updates:
        raise ProtocolError("no updates to aggregate")
    rounds = {u.round_index for u in updates}
    if len(rounds) > 1:
        raise ProtocolError(f"updates from mixed rounds {sorted(rounds)}")
    dims = {u.values.shape for u in updates}
    if len(dims) > 1:
        raise ProtocolError(f"updates with mixed dimensions {sorted(dims)}")
    values = weighted_average([u.values for u in updates], sizes)
    return EncryptedParamVector(values=values, round_index=updates[0].round_index)


class Aggregator:
    """Buffers one round of client updates, then averages in client-id order.

    This role is deliberately key-blind: it is constructed from a roster of
    client ids and nothing else, and its only outputs are the averaged vector
    it was fed and a weighted scalar loss.  Sorting by id before summing makes
    the result independent of arrival order, bit for bit.
    """

    def __init__(self, expected_ids: list[int]):
        if len(set(expected_ids)) != len(expected_ids):
            raise ProtocolError(f"duplicate client ids in roster {expected_ids}")
        self.expected_ids = sorted(expected_ids)
        self._buffer: dict[int, tuple[np.ndarray, int, float, int]] = {}

    def submit(self, client_id: int, values: np.ndarray, size: int,
               train_loss: float, round_index: int) -> None:
        if client_id not in self.expected_ids:
            raise ProtocolError(f"update from unknown client {client_id}")
        if client_id in self._buffer:
            raise ProtocolError(f"duplicate update from client {client_id}")
        self._buffer[client_id] = (np.asarray(values, dtype=np.float64), size,
                                   float(train_loss), round_index)

    def ready(self) -> bool:
        return len(self._buffer) == len(self.expected_ids)

    def finish(self) -> tuple[np.ndarray, float, int]:
        """Averaged vector, weighted mean loss, and the round index."""
        missing = [i for i in self.expected_ids if i not in self._buffer]
        if missing:
            raise ProtocolError(
                f"missing update from client {missing[0]}"
                + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else "")
            )
        rounds = {self._buffer[i][3] for i in self.expected_ids}
        if len(rounds) > 1:
            raise ProtocolError(f"updates from mixed rounds {sorted(rounds)}")
        ordered = [self._buffer[i] for i in self.expected_ids]
        vectors = [v for v, _, _, _ in ordered]
        sizes = [s for _, s, _, _ in ordered]
        losses = [np.full(1, l) for _, _, l, _ in ordered]
        mean_vec = weighted_average(vectors, sizes)
        mean_loss = float(weighted_average(losses, sizes)[0])
        return mean_vec, mean_loss, rounds.pop()
