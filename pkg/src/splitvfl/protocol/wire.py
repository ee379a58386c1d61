"""Length-prefixed binary frames and the message vocabulary.

Frame: ``u32 length | u8 msg_type | payload`` (big-endian; ``length`` counts
payload bytes only).  Tensors travel as::

    u8 dtype (0x01 = f32) | u8 rank | rank x u32 dims | big-endian f32 data

Encoding is canonical: each message has exactly one byte form, and decoding
rejects trailing bytes.  No message type has a field for raw features,
pixels, or labels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

PROTOCOL_VERSION = 1
HEADER_SIZE = 5
MAX_PAYLOAD = 1 << 28
F32_TAG = 0x01
ROLE_CODES = {"guest": 0, "host": 1}
ROLE_NAMES = {v: k for k, v in ROLE_CODES.items()}


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ------------------------------------------------------------ reader ---

class _Reader:
    def __init__(self, buf: bytes, base: int = 0):
        self.buf = memoryview(buf)
        self.pos = 0
        self.base = base

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DecodeError(f"truncated {what}: need {n} bytes, have {len(self.buf) - self.pos}",
                              self.base + self.pos)
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(">" + fmt, self.take(struct.calcsize(">" + fmt), what))

    def rest(self) -> bytes:
        out = bytes(self.buf[self.pos:])
        self.pos = len(self.buf)
        return out

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise DecodeError(f"{len(self.buf) - self.pos} trailing byte(s)", self.base + self.pos)


# ------------------------------------------------------------ tensors ---

def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype != np.float32:
        raise TypeError(f"only float32 tensors go on the wire, got {t.dtype}")
    if t.ndim > 255:
        raise ValueError("tensor rank exceeds 255")
    head = struct.pack(">BB", F32_TAG, t.ndim) + struct.pack(f">{t.ndim}I", *t.shape)
    return head + t.astype(">f4").tobytes()


def _decode_tensor(r: _Reader) -> np.ndarray:
    start = r.pos
    tag, rank = r.unpack("BB", "tensor header")
    if tag != F32_TAG:
        raise DecodeError(f"unknown tensor dtype tag 0x{tag:02x}", r.base + start)
    dims = r.unpack(f"{rank}I", "tensor dims")
    count = math.prod(dims)
    if 4 * count > MAX_PAYLOAD:
        raise DecodeError(f"tensor of {count} elements exceeds payload limit", r.base + start)
    raw = r.take(4 * count, "tensor data")
    return np.frombuffer(raw, dtype=">f4").astype(np.float32).reshape(dims)


def decode_tensor(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    t = _decode_tensor(r)
    r.finish()
    return t


def _tensor_bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ----------------------------------------------------------- messages ---

class Message:
    msg_type: ClassVar[int]

    def payload(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def parse(cls, r: _Reader) -> "Message":
        raise NotImplementedError


@dataclass(frozen=True)
class Hello(Message):
    protocol_version: int
    role: str
    config_digest: bytes
    msg_type: ClassVar[int] = 0x01

    def payload(self):
        if len(self.config_digest) != 32:
            raise ValueError("config_digest must be 32 bytes")
        if self.role not in ROLE_CODES:
            raise ValueError(f"role must be 'guest' or 'host', got {self.role!r}")
        return struct.pack(">HB", self.protocol_version, ROLE_CODES[self.role]) + self.config_digest

    @classmethod
    def parse(cls, r):
        version, role = r.unpack("HB", "hello header")
        if role not in ROLE_NAMES:
            raise DecodeError(f"unknown role code {role}", r.base + 2)
        return cls(version, ROLE_NAMES[role], r.take(32, "config digest"))


@dataclass(frozen=True)
class AlignRequest(Message):
    digests: tuple[bytes, ...]
    msg_type: ClassVar[int] = 0x02

    def payload(self):
        size = len(self.digests[0]) if self.digests else 32
        if any(len(d) != size for d in self.digests):
            raise ValueError("digests must share one length")
        return struct.pack(">HI", size, len(self.digests)) + b"".join(self.digests)

    @classmethod
    def parse(cls, r):
        size, count = r.unpack("HI", "align header")
        if size != 32:
            raise DecodeError(f"digest length {size}, expected 32", r.base)
        raw = r.take(size * count, "digests")
        return cls(tuple(raw[i:i + size] for i in range(0, len(raw), size)))


@dataclass(frozen=True)
class AlignResponse(Message):
    ids: tuple[str, ...]
    order_seed: int
    msg_type: ClassVar[int] = 0x03

    def payload(self):
        out = bytearray(struct.pack(">QI", self.order_seed, len(self.ids)))
        for sid in self.ids:
            raw = sid.encode("utf-8")
            out += struct.pack(">H", len(raw)) + raw
        return bytes(out)

    @classmethod
    def parse(cls, r):
        seed, count = r.unpack("QI", "align response header")
        ids = []
        for _ in range(count):
            at = r.pos
            (n,) = r.unpack("H", "id length")
            try:
                ids.append(r.take(n, "id").decode("utf-8"))
            except UnicodeDecodeError:
                raise DecodeError("id is not valid UTF-8", r.base + at) from None
        return cls(tuple(ids), seed)


@dataclass(frozen=True, eq=False)
class _TensorMessage(Message):
    epoch: int
    batch: int
    tensor: np.ndarray

    def payload(self):
        return struct.pack(">II", self.epoch, self.batch) + encode_tensor(self.tensor)

    @classmethod
    def parse(cls, r):
        epoch, batch = r.unpack("II", "epoch/batch")
        return cls(epoch, batch, _decode_tensor(r))

    def __eq__(self, other):
        return (type(self) is type(other) and self.epoch == other.epoch and self.batch == other.batch
                and _tensor_bits_equal(self.tensor, other.tensor))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BatchForward(_TensorMessage):
    """Host embedding for one training batch."""
    msg_type: ClassVar[int] = 0x10


@dataclass(frozen=True, eq=False)
class BatchGradient(_TensorMessage):
    """Gradient of the loss w.r.t. the host embedding."""
    msg_type: ClassVar[int] = 0x11


@dataclass(frozen=True, eq=False)
class EvalForward(_TensorMessage):
    """Host embedding for an evaluation batch; never answered with a gradient."""
    msg_type: ClassVar[int] = 0x12


@dataclass(frozen=True, eq=False)
class EpochMetrics(Message):
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    msg_type: ClassVar[int] = 0x20

    def payload(self):
        return struct.pack(">Iddd", self.epoch, self.train_loss, self.val_loss, self.val_accuracy)

    @classmethod
    def parse(cls, r):
        return cls(*r.unpack("Iddd", "metrics"))

    def __eq__(self, other):
        # bitwise, so NaN metrics compare equal to themselves
        return type(self) is type(other) and self.payload() == other.payload()

    __hash__ = None


@dataclass(frozen=True)
class Shutdown(Message):
    reason: int = 0
    msg_type: ClassVar[int] = 0x7E

    def payload(self):
        return struct.pack(">B", self.reason)

    @classmethod
    def parse(cls, r):
        return cls(*r.unpack("B", "reason"))


@dataclass(frozen=True)
class ProtocolErrorMsg(Message):
    code: int
    message: str
    msg_type: ClassVar[int] = 0x7F

    def payload(self):
        return struct.pack(">B", self.code) + self.message.encode("utf-8")

    @classmethod
    def parse(cls, r):
        (code,) = r.unpack("B", "error code")
        at = r.pos
        try:
            text = r.rest().decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("error text is not valid UTF-8", r.base + at) from None
        return cls(code, text)


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.msg_type: cls
    for cls in (Hello, AlignRequest, AlignResponse, BatchForward, BatchGradient, EvalForward,
                EpochMetrics, Shutdown, ProtocolErrorMsg)
}


# ------------------------------------------------------------- frames ---

def encode_frame(msg: Message) -> bytes:
    payload = msg.payload()
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return struct.pack(">IB", len(payload), msg.msg_type) + payload


def decode_header(header: bytes) -> tuple[int, int]:
    if len(header) != HEADER_SIZE:
        raise DecodeError(f"truncated header: {len(header)} of {HEADER_SIZE} bytes", len(header))
    length, msg_type = struct.unpack(">IB", header)
    if length > MAX_PAYLOAD:
        raise DecodeError(f"payload length {length} exceeds {MAX_PAYLOAD}", 0)
    if msg_type not in MESSAGE_TYPES:
        raise DecodeError(f"unknown msg_type 0x{msg_type:02x}", 4)
    return length, msg_type


def decode_payload(msg_type: int, payload: bytes) -> Message:
    r = _Reader(payload, base=HEADER_SIZE)
    msg = MESSAGE_TYPES[msg_type].parse(r)
    r.finish()
    return msg


def decode_frame(buf: bytes) -> Message:
    length, msg_type = decode_header(bytes(buf[:HEADER_SIZE]))
    if len(buf) - HEADER_SIZE < length:
        raise DecodeError(f"truncated payload: header says {length} bytes, have {len(buf) - HEADER_SIZE}",
                          len(buf))
    if len(buf) - HEADER_SIZE > length:
        raise DecodeError(f"{len(buf) - HEADER_SIZE - length} byte(s) after payload", HEADER_SIZE + length)
    return decode_payload(msg_type, bytes(buf[HEADER_SIZE:]))

