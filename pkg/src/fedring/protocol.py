"""Binary message framing and weight serialization.

Every server/client exchange is an :class:`Envelope` encoded as::

    magic "FLR1" | type tag (1B) | token len (2B) + token |
    round index (4B) | payload len (4B) | payload

All multi-byte integers are little-endian.  Model weights travel and are
checkpointed in a single format (:func:`serialize_weights`), written to
disk verbatim as ``.flw`` files.  Weights are 64-bit floats on the wire so
encodings are byte-identical across platforms and aggregation results can
be compared exactly in tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    LengthMismatch,
    NonFiniteWeight,
    TruncatedFrame,
    UnknownMsgType,
)

MAGIC = b"FLR1"

FLW_SUFFIX = ".flw"


class MsgType(IntEnum):
    LOGIN_REQUEST = 1
    LOGIN_ACCEPT = 2
    LOGIN_REJECT = 3
    MODEL_PULL = 4
    MODEL_PUSH = 5
    MODEL_PAYLOAD = 6
    ACK_SUBMISSION = 7
    ROUND_COMPLETE = 8
    TRAINING_FINISHED = 9
    ERROR = 10


# Message types that may legitimately carry an empty token: the login
# request happens before a token exists, and a rejection never issues one.
_TOKENLESS = frozenset({MsgType.LOGIN_REQUEST, MsgType.LOGIN_REJECT})
# Login traffic is round-agnostic and always tagged round 0.
_ROUND_ZERO = frozenset({MsgType.LOGIN_REQUEST, MsgType.LOGIN_ACCEPT})


@dataclass(frozen=True)
class Envelope:
    """One framed protocol message.

    ``payload_len`` is normally derived from ``payload``; it is stored
    explicitly so a mismatching value can be detected at encode time.
    """

    msg_type: MsgType
    token: bytes = b""
    round_index: int = 0
    payload: bytes = b""
    payload_len: int = -1

    def __post_init__(self):
        if self.payload_len < 0:
            object.__setattr__(self, "payload_len", len(self.payload))

    def validate(self) -> None:
        """Raise InvariantViolation if any field combination is illegal."""
        if self.payload_len != len(self.payload):
            raise InvariantViolation(
                f"payload_len {self.payload_len} != len(payload) {len(self.payload)}"
            )
        if not self.token and self.msg_type not in _TOKENLESS:
            raise InvariantViolation(f"{self.msg_type.name} requires a token")
        if self.round_index != 0 and self.msg_type in _ROUND_ZERO:
            raise InvariantViolation(f"{self.msg_type.name} must carry round_index 0")
        if self.round_index < 0:
            raise InvariantViolation("round_index must be non-negative")
        if len(self.token) > 0xFFFF:
            raise InvariantViolation("token longer than 65535 bytes")
        if len(self.payload) > 0xFFFFFFFF:
            raise InvariantViolation("payload longer than 2^32-1 bytes")


def encode_envelope(env: Envelope) -> bytes:
    env.validate()
    return b"".join(
        (
            MAGIC,
            bytes([env.msg_type.value]),
            struct.pack("<H", len(env.token)),
            env.token,
            struct.pack("<I", env.round_index),
            struct.pack("<I", env.payload_len),
            env.payload,
        )
    )


def decode_envelope(data: bytes) -> Envelope:
    """Inverse of :func:`encode_envelope`.

    Raises BadMagic, UnknownMsgType, TruncatedFrame or LengthMismatch; a
    proper prefix of a valid frame always raises TruncatedFrame, never
    returns a partial value.
    """
    if len(data) < 4:
        raise TruncatedFrame(f"{len(data)} bytes, need at least 4 for magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 5:
        raise TruncatedFrame("frame ends before message type tag")
    tag = data[4]
    try:
        msg_type = MsgType(tag)
    except ValueError:
        raise UnknownMsgType(f"message type tag 0x{tag:02X}") from None
    if len(data) < 7:
        raise TruncatedFrame("frame ends before token length")
    (token_len,) = struct.unpack_from("<H", data, 5)
    pos = 7
    if len(data) < pos + token_len + 8:
        raise TruncatedFrame("frame ends inside token or fixed header")
    token = data[pos : pos + token_len]
    pos += token_len
    round_index, payload_len = struct.unpack_from("<II", data, pos)
    pos += 8
    if len(data) < pos + payload_len:
        raise TruncatedFrame(
            f"payload declares {payload_len} bytes, {len(data) - pos} present"
        )
    if len(data) > pos + payload_len:
        raise LengthMismatch(f"{len(data) - pos - payload_len} trailing bytes")
    payload = data[pos : pos + payload_len]
    return Envelope(msg_type, token, round_index, payload, payload_len)


@dataclass(frozen=True)
class Credential:
    client_id: str
    secret: bytes

    def __post_init__(self):
        if not self.client_id:
            raise InvariantViolation("client_id must be non-empty")
        if len(self.secret) < 16:
            raise InvariantViolation("secret must be at least 16 bytes")


@dataclass(frozen=True)
class WeightEntry:
    """One named tensor: logical shape plus flat float64 data."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).ravel()
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.name:
            raise InvariantViolation("entry name must be non-empty")
        if any(s <= 0 for s in self.shape):
            raise InvariantViolation(f"{self.name}: shape {self.shape} not positive")
        n = int(np.prod(self.shape))
        if n != data.size:
            raise InvariantViolation(
                f"{self.name}: product(shape)={n} != len(data)={data.size}"
            )

    def reshaped(self) -> np.ndarray:
        return self.data.reshape(self.shape)


@dataclass(frozen=True)
class WeightSet:
    """Ordered, named collection of flat float tensors.

    Entry names are unique and sorted lexicographically, enforced here at
    construction so aggregation can zip entries positionally.
    ``sample_count`` is the number of local training samples behind these
    weights (0 for a freshly initialized global model).
    """

    entries: tuple[WeightEntry, ...]
    sample_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if any(a >= b for a, b in zip(names, names[1:])):
            raise InvariantViolation(f"entry names not sorted/unique: {names}")
        if self.sample_count < 0:
            raise InvariantViolation("sample_count must be non-negative")

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], sample_count: int = 0) -> "WeightSet":
        entries = tuple(
            WeightEntry(name, np.shape(arrays[name]) or (1,), np.ravel(arrays[name]))
            for name in sorted(arrays)
        )
        return cls(entries, sample_count)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {e.name: e.reshaped().copy() for e in self.entries}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def total_params(self) -> int:
        return sum(e.data.size for e in self.entries)

    def all_finite(self) -> bool:
        return all(np.isfinite(e.data).all() for e in self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightSet):
            return NotImplemented
        return (
            self.sample_count == other.sample_count
            and self.names == other.names
            and all(a.shape == b.shape for a, b in zip(self.entries, other.entries))
            and all(
                a.data.tobytes() == b.data.tobytes()
                for a, b in zip(self.entries, other.entries)
            )
        )

    __hash__ = None


def serialize_weights(w: WeightSet) -> bytes:
    """Encode a WeightSet; bit-exact round trip with deserialize_weights.

    Layout: entry count (4B); per entry: name len (2B) + name, rank (1B),
    rank x 4B dims, 8B x count little-endian floats; sample_count (8B).
    """
    parts = [struct.pack("<I", len(w.entries))]
    for e in w.entries:
        if not np.isfinite(e.data).all():
            raise NonFiniteWeight(f"entry {e.name!r} contains NaN or Inf")
        name = e.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise InvariantViolation(f"entry name too long: {e.name[:32]!r}...")
        if len(e.shape) > 0xFF:
            raise InvariantViolation(f"entry rank {len(e.shape)} exceeds 255")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<B", len(e.shape)))
        parts.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
        parts.append(e.data.astype("<f8", copy=False).tobytes())
    parts.append(struct.pack("<Q", w.sample_count))
    return b"".join(parts)


def deserialize_weights(data: bytes) -> WeightSet:
    def take(n: int, what: str) -> int:
        if pos[0] + n > len(data):
            raise TruncatedFrame(f"ends inside {what}")
        pos[0] += n
        return pos[0] - n

    pos = [0]
    (count,) = struct.unpack_from("<I", data, take(4, "entry count"))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, take(2, "name length"))
        at = take(name_len, "name")
        name = data[at : at + name_len].decode("utf-8")
        (rank,) = struct.unpack_from("<B", data, take(1, "rank"))
        shape = struct.unpack_from(f"<{rank}I", data, take(4 * rank, "dims"))
        n = int(np.prod(shape)) if rank else 1
        at = take(8 * n, f"data of {name!r}")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=at).astype(np.float64)
        entries.append(WeightEntry(name, shape, values))
    (sample_count,) = struct.unpack_from("<Q", data, take(8, "sample count"))
    if pos[0] != len(data):
        raise LengthMismatch(f"{len(data) - pos[0]} trailing bytes")
    return WeightSet(tuple(entries), sample_count)


def encode_login_payload(cred: Credential) -> bytes:
    """LoginRequest payload: 2-byte id length + id + secret."""
    cid = cred.client_id.encode("utf-8")
    return struct.pack("<H", len(cid)) + cid + cred.secret


def decode_login_payload(payload: bytes) -> Credential:
    if len(payload) < 2:
        raise TruncatedFrame("login payload shorter than the id length")
    (id_len,) = struct.unpack_from("<H", payload, 0)
    if len(payload) < 2 + id_len:
        raise TruncatedFrame("login payload ends inside the client id")
    client_id = payload[2 : 2 + id_len].decode("utf-8")
    return Credential(client_id, payload[2 + id_len :])


def write_flw(path: str | Path, w: WeightSet) -> None:
    Path(path).write_bytes(serialize_weights(w))


def read_flw(path: str | Path) -> WeightSet:
    return deserialize_weights(Path(path).read_bytes())
