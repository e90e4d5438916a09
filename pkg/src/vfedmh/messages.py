"""The five protocol payloads and their framed binary encoding.

Frame layout (all integers little-endian unless noted):

    magic   4 bytes  0x56 0x46 0x4D 0x48 ("VFMH")
    version u8       1
    msg_type u8      1=PublicKey 2=MaskedEmbedding 3=GlobalEmbedding
                     4=Prediction 5=LossAndGrad
    sender  u16
    payload_len u32
    payload

Tensors travel as rank u8, each dim u32, then float64 data row-major.  Ring
vectors are u64 elements.  Group elements are a u16 length prefix followed by
the big-endian magnitude.  The same bytes flow over both the in-memory and
TCP transports, so protocol outcomes cannot depend on the transport.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

MAGIC = b"VFMH"
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

MSG_PUBLIC_KEY = 1
MSG_MASKED_EMBEDDING = 2
MSG_GLOBAL_EMBEDDING = 3
MSG_PREDICTION = 4
MSG_LOSS_AND_GRAD = 5

ENC_RING = 1
ENC_PLAIN = 2

# batch index marking the per-epoch evaluation exchange
EVAL_BATCH = 0xFFFFFFFF


class FrameError(ValueError):
    """Raised on malformed frames: bad magic/version/type or bogus lengths."""


@dataclass(frozen=True, order=True)
class RoundNonce:
    """(epoch, batch) pair; strictly increasing lexicographically in a session."""

    epoch: int
    batch: int

    @property
    def value(self) -> int:
        return ((self.epoch & 0xFFFFFFFF) << 32) | (self.batch & 0xFFFFFFFF)

    @property
    def is_eval(self) -> bool:
        return self.batch == EVAL_BATCH


class _Message:
    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not (
                    isinstance(a, np.ndarray)
                    and isinstance(b, np.ndarray)
                    and a.dtype == b.dtype
                    and np.array_equal(a, b)
                ):
                    return False
            elif a != b:
                return False
        return True


@dataclass(eq=False)
class PublicKeyMsg(_Message):
    sender: int
    owner: int
    pk: int


@dataclass(eq=False)
class MaskedEmbeddingMsg(_Message):
    sender: int
    nonce: RoundNonce
    batch_id: int
    encoding: int  # ENC_RING (u64 masked fixed point) or ENC_PLAIN (raw f64)
    shape: tuple
    vector: np.ndarray  # flat, dtype per encoding


@dataclass(eq=False)
class GlobalEmbeddingMsg(_Message):
    sender: int
    nonce: RoundNonce
    values: np.ndarray  # batch x d_emb float64


@dataclass(eq=False)
class PredictionMsg(_Message):
    sender: int
    nonce: RoundNonce
    logits: np.ndarray  # batch x classes float64


@dataclass(eq=False)
class LossAndGradMsg(_Message):
    sender: int
    nonce: RoundNonce
    loss: float
    grad: np.ndarray  # batch x classes float64


Message = PublicKeyMsg | MaskedEmbeddingMsg | GlobalEmbeddingMsg | PredictionMsg | LossAndGradMsg


# ---------------------------------------------------------------------------
# Primitive encoders
# ---------------------------------------------------------------------------


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim > 255:
        raise FrameError("tensor rank exceeds 255")
    head = struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.astype("<f8").tobytes()


def _unpack_tensor(buf: memoryview, offset: int):
    (rank,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack_from("<I", buf, offset)
        dims.append(d)
        offset += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    end = offset + 8 * count
    if end > len(buf):
        raise FrameError("tensor data truncated")
    arr = np.frombuffer(buf[offset:end], dtype="<f8").reshape(dims).copy()
    return arr, end


def _pack_group_element(x: int) -> bytes:
    raw = x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")
    if len(raw) > 0xFFFF:
        raise FrameError("group element too large")
    return struct.pack("<H", len(raw)) + raw


def _unpack_group_element(buf: memoryview, offset: int):
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    end = offset + n
    if end > len(buf):
        raise FrameError("group element truncated")
    return int.from_bytes(bytes(buf[offset:end]), "big"), end


def _pack_nonce(nonce: RoundNonce) -> bytes:
    return struct.pack("<II", nonce.epoch, nonce.batch)


def _unpack_nonce(buf: memoryview, offset: int):
    epoch, batch = struct.unpack_from("<II", buf, offset)
    return RoundNonce(epoch, batch), offset + 8


# ---------------------------------------------------------------------------
# Message payloads
# ---------------------------------------------------------------------------


def encode_payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, PublicKeyMsg):
        return MSG_PUBLIC_KEY, struct.pack("<H", msg.owner) + _pack_group_element(msg.pk)
    if isinstance(msg, MaskedEmbeddingMsg):
        head = _pack_nonce(msg.nonce) + struct.pack("<IB", msg.batch_id, msg.encoding)
        head += struct.pack("<B", len(msg.shape))
        head += b"".join(struct.pack("<I", d) for d in msg.shape)
        if msg.encoding == ENC_RING:
            data = np.ascontiguousarray(msg.vector, dtype="<u8").tobytes()
        elif msg.encoding == ENC_PLAIN:
            data = np.ascontiguousarray(msg.vector, dtype="<f8").tobytes()
        else:
            raise FrameError(f"unknown embedding encoding {msg.encoding}")
        return MSG_MASKED_EMBEDDING, head + data
    if isinstance(msg, GlobalEmbeddingMsg):
        return MSG_GLOBAL_EMBEDDING, _pack_nonce(msg.nonce) + _pack_tensor(msg.values)
    if isinstance(msg, PredictionMsg):
        return MSG_PREDICTION, _pack_nonce(msg.nonce) + _pack_tensor(msg.logits)
    if isinstance(msg, LossAndGradMsg):
        return MSG_LOSS_AND_GRAD, (
            _pack_nonce(msg.nonce) + struct.pack("<d", msg.loss) + _pack_tensor(msg.grad)
        )
    raise FrameError(f"cannot encode {type(msg).__name__}")


def decode_payload(msg_type: int, sender: int, payload: bytes) -> Message:
    buf = memoryview(payload)
    try:
        if msg_type == MSG_PUBLIC_KEY:
            (owner,) = struct.unpack_from("<H", buf, 0)
            pk, end = _unpack_group_element(buf, 2)
            _expect_consumed(buf, end)
            return PublicKeyMsg(sender, owner, pk)
        if msg_type == MSG_MASKED_EMBEDDING:
            nonce, off = _unpack_nonce(buf, 0)
            batch_id, encoding = struct.unpack_from("<IB", buf, off)
            off += 5
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = []
            for _ in range(rank):
                (d,) = struct.unpack_from("<I", buf, off)
                shape.append(d)
                off += 4
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            end = off + 8 * count
            if end != len(buf):
                raise FrameError("masked embedding length mismatch")
            if encoding == ENC_RING:
                vec = np.frombuffer(buf[off:end], dtype="<u8").copy()
            elif encoding == ENC_PLAIN:
                vec = np.frombuffer(buf[off:end], dtype="<f8").copy()
            else:
                raise FrameError(f"unknown embedding encoding {encoding}")
            return MaskedEmbeddingMsg(sender, nonce, batch_id, encoding, tuple(shape), vec)
        if msg_type == MSG_GLOBAL_EMBEDDING:
            nonce, off = _unpack_nonce(buf, 0)
            values, end = _unpack_tensor(buf, off)
            _expect_consumed(buf, end)
            return GlobalEmbeddingMsg(sender, nonce, values)
        if msg_type == MSG_PREDICTION:
            nonce, off = _unpack_nonce(buf, 0)
            logits, end = _unpack_tensor(buf, off)
            _expect_consumed(buf, end)
            return PredictionMsg(sender, nonce, logits)
        if msg_type == MSG_LOSS_AND_GRAD:
            nonce, off = _unpack_nonce(buf, 0)
            (loss,) = struct.unpack_from("<d", buf, off)
            grad, end = _unpack_tensor(buf, off + 8)
            _expect_consumed(buf, end)
            return LossAndGradMsg(sender, nonce, loss, grad)
    except struct.error as exc:
        raise FrameError(f"payload truncated: {exc}") from exc
    raise FrameError(f"unknown msg_type {msg_type}")


def _expect_consumed(buf: memoryview, end: int):
    if end != len(buf):
        raise FrameError(f"trailing bytes in payload ({len(buf) - end})")


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBBHI")
HEADER_SIZE = _HEADER.size


def encode_frame(msg: Message) -> bytes:
    msg_type, payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the 64 MiB limit")
    return _HEADER.pack(MAGIC, VERSION, msg_type, msg.sender, len(payload)) + payload


def parse_header(header: bytes) -> tuple[int, int, int]:
    """Validate a frame header; returns (msg_type, sender, payload_len)."""
    if len(header) != HEADER_SIZE:
        raise FrameError(f"short header ({len(header)} bytes)")
    magic, version, msg_type, sender, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if not MSG_PUBLIC_KEY <= msg_type <= MSG_LOSS_AND_GRAD:
        raise FrameError(f"unknown msg_type {msg_type}")
    if payload_len > MAX_PAYLOAD:
        raise FrameError(f"payload_len {payload_len} exceeds the 64 MiB limit")
    return msg_type, sender, payload_len


def decode_frame(data: bytes) -> Message:
    """Decode one complete frame held in a buffer."""
    msg_type, sender, payload_len = parse_header(bytes(data[:HEADER_SIZE]))
    payload = bytes(data[HEADER_SIZE:])
    if len(payload) != payload_len:
        raise FrameError(f"payload length {len(payload)} != header {payload_len}")
    return decode_payload(msg_type, sender, payload)
