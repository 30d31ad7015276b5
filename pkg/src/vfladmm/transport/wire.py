"""Binary frame codec for coordinator/party messages.

Frame layout (little-endian)::

    0  2  magic  b"VA"
    2  1  version (1)
    3  1  kind
    4  4  iteration (uint32)
    8  2  party_id (uint16)
    10 4  payload_len in bytes (uint32)
    14 .. payload: float64 values, vectors concatenated

The number of vectors is fixed by the kind; a two-vector payload is split
into equal halves.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"VA"
VERSION = 1
HEADER = struct.Struct("<2sBBIHI")
HEADER_SIZE = HEADER.size  # 14
MAX_PAYLOAD = 1 << 30
_F64 = np.dtype("<f8")


class ProtocolError(RuntimeError):
    """Malformed frame or a message that breaks the protocol."""


class IncompleteFrame(Exception):
    """Not enough bytes yet; ``needed`` is the total frame size if known."""

    def __init__(self, needed: int | None = None):
        super().__init__(f"incomplete frame (need {needed} bytes)" if needed else "incomplete frame")
        self.needed = needed


class Kind(enum.IntEnum):
    REGISTER = 1
    ACK = 2
    BROADCAST = 3
    PUSH_SHARE = 4
    SHUTDOWN = 5


N_VECTORS = {
    Kind.REGISTER: 1,
    Kind.ACK: 1,
    Kind.BROADCAST: 2,
    Kind.PUSH_SHARE: 1,
    Kind.SHUTDOWN: 0,
}


@dataclass(frozen=True, eq=False)
class Message:
    kind: Kind
    iteration: int
    party_id: int = 0
    payload: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not 0 <= self.iteration < 2**32:
            raise ProtocolError(f"iteration {self.iteration} outside uint32")
        if not 0 <= self.party_id < 2**16:
            raise ProtocolError(f"party id {self.party_id} outside uint16")
        vecs = tuple(np.ascontiguousarray(v, dtype=np.float64).reshape(-1) for v in self.payload)
        if len(vecs) != N_VECTORS[kind]:
            raise ProtocolError(f"{kind.name} carries {N_VECTORS[kind]} vectors, got {len(vecs)}")
        if len(vecs) == 2 and vecs[0].size != vecs[1].size:
            raise ProtocolError(f"{kind.name} vectors differ in length")
        for v in vecs:
            v.setflags(write=False)
        object.__setattr__(self, "payload", vecs)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (self.kind == other.kind and self.iteration == other.iteration
                and self.party_id == other.party_id
                and len(self.payload) == len(other.payload)
                and all(a.tobytes() == b.tobytes() for a, b in zip(self.payload, other.payload)))

    __hash__ = None


def encode(msg: Message) -> bytes:
    body = b"".join(v.astype(_F64, copy=False).tobytes() for v in msg.payload)
    return HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.iteration, msg.party_id, len(body)) + body


def decode_prefix(buf) -> tuple[Message, int]:
    """Decode the frame at the start of ``buf``; return it and the bytes consumed.

    Raises
    ------
    IncompleteFrame
        ``buf`` holds only part of a frame.
    ProtocolError
        The header or payload is invalid.
    """
    view = memoryview(buf)
    if len(view) < HEADER_SIZE:
        # reject a wrong magic as early as possible
        if len(view) >= 1 and bytes(view[:min(2, len(view))]) != MAGIC[:min(2, len(view))]:
            raise ProtocolError("bad magic")
        raise IncompleteFrame(None)
    magic, version, kind, iteration, party_id, length = HEADER.unpack_from(view)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    if length % 8:
        raise ProtocolError(f"payload length {length} is not a multiple of 8")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    nvec = N_VECTORS[kind]
    if nvec == 0 and length:
        raise ProtocolError(f"{kind.name} must have an empty payload")
    if nvec == 2 and length % 16:
        raise ProtocolError(f"{kind.name} payload cannot split into two equal vectors")
    total = HEADER_SIZE + length
    if len(view) < total:
        raise IncompleteFrame(total)
    values = np.frombuffer(view[HEADER_SIZE:total], dtype=_F64).astype(np.float64)
    vecs = tuple(np.split(values, nvec)) if nvec else ()
    return Message(kind, iteration, party_id, vecs), total


def decode(frame) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, used = decode_prefix(frame)
    if used != len(frame):
        raise ProtocolError(f"{len(frame) - used} trailing bytes after frame")
    return msg


class FrameBuffer:
    """Accumulates stream bytes and yields whole messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def pop(self) -> Message | None:
        try:
            msg, used = decode_prefix(self._buf)
        except IncompleteFrame:
            return None
        del self._buf[:used]
        return msg

    def __len__(self):
        return len(self._buf)
