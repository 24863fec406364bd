"""Framed binary messages between the vault server and adapter clients.

Frame: ``b"GBX1"`` | u32 LE length | u8 message type | payload, where length
counts the type byte plus the payload.  Everything is little-endian; tensors use
the tensor-core encoding (u8 dtype tag, u8 rank, u32 dims, raw scalars).

Payloads::

    DESCRIBE_REQ   (empty)
    DESCRIBE_RSP   u16 count, count x descriptor
                   descriptor = u8 id, u8 modality, u8 grad, u8 encoder, u8 layer,
                                u8 rank, rank x u32 dims, u16 name length, utf-8 name
    EMBED_REQ      tensor (integral token ids stored as float32)
    EMBED_RSP      tensor
    SESSION_OPEN   (empty)
    SESSION_ACK    u64 session id
    FORWARD_REQ    u64 session id, u8 text_free, u16 n, n x (u8 entry id, tensor)
    FORWARD_RSP    u16 n, n x (u8 output tag, tensor)
    BACKWARD_REQ   u64 session id, u16 n, n x (u8 output tag, tensor)
    BACKWARD_RSP   u16 n, n x (u8 entry id, tensor)
    SESSION_CLOSE  u64 session id
    ERROR          u16 code, utf-8 message

``text_free`` counts trailing text-embedding rows that get no positional
embedding (the client's extra tokens).  The server answers SESSION_CLOSE with
SESSION_ACK.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from graybox.tensor import DecodeError, Tensor, decode_tensor, encode_tensor
from graybox.vault import OUTPUT_TAGS, EntryPointDescriptor, Modality

MAGIC = b"GBX1"
HEADER = 9  # magic + length + type
MAX_FRAME = 64 * 1024 * 1024


class MsgType(IntEnum):
    DESCRIBE_REQ = 1
    DESCRIBE_RSP = 2
    EMBED_REQ = 3
    EMBED_RSP = 4
    SESSION_OPEN = 5
    SESSION_ACK = 6
    FORWARD_REQ = 7
    FORWARD_RSP = 8
    BACKWARD_REQ = 9
    BACKWARD_RSP = 10
    SESSION_CLOSE = 11
    ERROR = 12


class ErrorCode(IntEnum):
    """Fixed error table.  Only TRANSPORT-class codes are worth retrying."""

    MALFORMED_FRAME = 1
    UNKNOWN_MSG_TYPE = 2
    FRAME_TOO_LARGE = 3
    UNKNOWN_ENTRY = 4
    SHAPE_MISMATCH = 5
    SESSION_STATE = 6
    INVALID_INPUT = 7
    STALE_SESSION = 8
    INTERNAL = 9
    ACCESS_DENIED = 10
    SERVER_BUSY = 11
    UNEXPECTED_MESSAGE = 12


RETRIABLE = frozenset({ErrorCode.SERVER_BUSY})


class ProtocolError(Exception):
    """Malformed or contract-violating traffic.  ``offset`` locates decode faults."""

    def __init__(self, message: str, offset: int | None = None, code: int = ErrorCode.MALFORMED_FRAME):
        text = message if offset is None else f"{message} (at byte {offset})"
        super().__init__(text)
        self.offset = offset
        self.code = int(code)


class RemoteError(ProtocolError):
    """An ERROR frame received from the peer."""

    def __init__(self, code: int, message: str):
        super().__init__(message, None, code)
        self.remote_message = message


MODALITY_CODES = {Modality.VISION_PIXELS: 0, Modality.TEXT_TOKEN_IDS: 1, Modality.TEXT_EMBEDDINGS: 2,
                  Modality.LAYER_PREFIX: 3}
MODALITY_FROM_CODE = {v: k for k, v in MODALITY_CODES.items()}
ENCODER_CODES = {None: 0, "vision": 1, "text": 2}
ENCODER_FROM_CODE = {v: k for k, v in ENCODER_CODES.items()}
TAG_CODES = {tag: i for i, tag in enumerate(OUTPUT_TAGS)}
TAG_FROM_CODE = dict(enumerate(OUTPUT_TAGS))
NO_LAYER = 255


# -- messages -----------------------------------------------------------------------------


@dataclass(eq=False)
class Message:
    type: MsgType
    session: int = 0
    text_free: int = 0
    descriptors: list[EntryPointDescriptor] = field(default_factory=list)
    tensor: Tensor | None = None
    items: list[tuple[object, Tensor]] = field(default_factory=list)  # (entry id | output tag, tensor)
    code: int = 0
    text: str = ""

    def tensors(self) -> list[Tensor]:
        return ([self.tensor] if self.tensor is not None else []) + [t for _, t in self.items]


# Field kinds each message type may carry.  The audit enumerates this table: no
# message type has a slot for backbone parameters.
SCHEMA: dict[MsgType, tuple[str, ...]] = {
    MsgType.DESCRIBE_REQ: (),
    MsgType.DESCRIBE_RSP: ("entry-descriptors",),
    MsgType.EMBED_REQ: ("token-ids",),
    MsgType.EMBED_RSP: ("embeddings-of-requested-ids",),
    MsgType.SESSION_OPEN: (),
    MsgType.SESSION_ACK: ("session-id",),
    MsgType.FORWARD_REQ: ("session-id", "text-free-count", "entry-activations"),
    MsgType.FORWARD_RSP: ("output-features",),
    MsgType.BACKWARD_REQ: ("session-id", "output-gradients"),
    MsgType.BACKWARD_RSP: ("entry-gradients",),
    MsgType.SESSION_CLOSE: ("session-id",),
    MsgType.ERROR: ("error-code", "error-text"),
}


def describe_req() -> Message:
    return Message(MsgType.DESCRIBE_REQ)


def error_msg(code: int, text: str) -> Message:
    return Message(MsgType.ERROR, code=int(code), text=text)


# -- encoding ----------------------------------------------------------------------------


def _items(msg: Message, key_codec) -> bytes:
    out = [struct.pack("<H", len(msg.items))]
    for key, t in msg.items:
        out.append(struct.pack("<B", key_codec(key)) + encode_tensor(t))
    return b"".join(out)


def _descriptor(d: EntryPointDescriptor) -> bytes:
    name = d.name.encode()
    head = struct.pack("<BBBBBB", d.id, MODALITY_CODES[d.modality], int(d.grad_available),
                       ENCODER_CODES[d.encoder], NO_LAYER if d.layer is None else d.layer, len(d.shape))
    return head + struct.pack(f"<{len(d.shape)}I", *d.shape) + struct.pack("<H", len(name)) + name


def encode_payload(msg: Message) -> bytes:
    t = msg.type
    if t in (MsgType.DESCRIBE_REQ, MsgType.SESSION_OPEN):
        return b""
    if t == MsgType.DESCRIBE_RSP:
        return struct.pack("<H", len(msg.descriptors)) + b"".join(_descriptor(d) for d in msg.descriptors)
    if t in (MsgType.EMBED_REQ, MsgType.EMBED_RSP):
        return encode_tensor(msg.tensor)
    if t in (MsgType.SESSION_ACK, MsgType.SESSION_CLOSE):
        return struct.pack("<Q", msg.session)
    if t == MsgType.FORWARD_REQ:
        return struct.pack("<QB", msg.session, msg.text_free) + _items(msg, int)
    if t == MsgType.FORWARD_RSP:
        return _items(msg, TAG_CODES.__getitem__)
    if t == MsgType.BACKWARD_REQ:
        return struct.pack("<Q", msg.session) + _items(msg, TAG_CODES.__getitem__)
    if t == MsgType.BACKWARD_RSP:
        return _items(msg, int)
    if t == MsgType.ERROR:
        return struct.pack("<H", msg.code) + msg.text.encode()
    raise ProtocolError(f"cannot encode message type {t}", code=ErrorCode.UNKNOWN_MSG_TYPE)


def encode(msg: Message) -> bytes:
    payload = encode_payload(msg)
    length = 1 + len(payload)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME}-byte cap", code=ErrorCode.FRAME_TOO_LARGE)
    return MAGIC + struct.pack("<IB", length, int(msg.type)) + payload


# -- decoding ----------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: memoryview, pos: int, end: int):
        self.buf, self.pos, self.end = buf, pos, end

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise ProtocolError(f"truncated payload: need {size} bytes", self.pos)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ProtocolError(f"truncated payload: need {n} bytes", self.pos)
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def tensor(self) -> Tensor:
        try:
            t, self.pos = decode_tensor(self.buf[: self.end], self.pos)
        except DecodeError as e:
            raise ProtocolError(f"bad tensor: {e.args[0]}", e.offset) from None
        return t

    def text(self, n: int) -> str:
        at = self.pos
        try:
            return self.raw(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("invalid utf-8", at) from None

    def done(self) -> None:
        if self.pos != self.end:
            raise ProtocolError(f"{self.end - self.pos} trailing bytes in payload", self.pos)


def _read_items(r: _Reader, key_decode) -> list[tuple[object, Tensor]]:
    n = r.take("<H")
    items = []
    seen = set()
    for _ in range(n):
        at = r.pos
        key = key_decode(r.take("<B"), at)
        if key in seen:
            raise ProtocolError(f"duplicate key {key!r}", at)
        seen.add(key)
        items.append((key, r.tensor()))
    return items


def _entry_key(code: int, at: int) -> int:
    return code


def _tag_key(code: int, at: int) -> str:
    if code not in TAG_FROM_CODE:
        raise ProtocolError(f"unknown output tag {code}", at)
    return TAG_FROM_CODE[code]


def _read_descriptor(r: _Reader) -> EntryPointDescriptor:
    at = r.pos
    did, mod, grad, enc, layer, rank = r.take("<BBBBBB")
    if mod not in MODALITY_FROM_CODE or grad > 1 or enc not in ENCODER_FROM_CODE:
        raise ProtocolError("invalid descriptor fields", at)
    shape = tuple(r.take(f"<{rank}I")) if rank > 1 else ((r.take("<I"),) if rank == 1 else ())
    name = r.text(r.take("<H"))
    return EntryPointDescriptor(did, name, MODALITY_FROM_CODE[mod], shape, bool(grad), ENCODER_FROM_CODE[enc],
                                None if layer == NO_LAYER else layer)


def decode_payload(mtype: int, buf: memoryview, pos: int, end: int) -> Message:
    r = _Reader(buf, pos, end)
    try:
        t = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}", pos - 1, ErrorCode.UNKNOWN_MSG_TYPE) from None
    msg = Message(t)
    if t == MsgType.DESCRIBE_RSP:
        msg.descriptors = [_read_descriptor(r) for _ in range(r.take("<H"))]
    elif t in (MsgType.EMBED_REQ, MsgType.EMBED_RSP):
        msg.tensor = r.tensor()
    elif t in (MsgType.SESSION_ACK, MsgType.SESSION_CLOSE):
        msg.session = r.take("<Q")
    elif t == MsgType.FORWARD_REQ:
        msg.session, msg.text_free = r.take("<QB")
        msg.items = _read_items(r, _entry_key)
    elif t == MsgType.FORWARD_RSP:
        msg.items = _read_items(r, _tag_key)
    elif t == MsgType.BACKWARD_REQ:
        msg.session = r.take("<Q")
        msg.items = _read_items(r, _tag_key)
    elif t == MsgType.BACKWARD_RSP:
        msg.items = _read_items(r, _entry_key)
    elif t == MsgType.ERROR:
        msg.code = r.take("<H")
        msg.text = r.text(end - r.pos)
    r.done()
    return msg


def read_header(buf: bytes | memoryview, offset: int = 0) -> tuple[int, int]:
    """Validate the 9-byte header at ``offset``; returns (message type, payload length)."""
    buf = memoryview(buf)
    if len(buf) - offset < HEADER:
        raise ProtocolError("truncated frame header", offset)
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise ProtocolError("bad magic", offset)
    length, mtype = struct.unpack_from("<IB", buf, offset + 4)
    if length < 1:
        raise ProtocolError("frame length must count the type byte", offset + 4)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds cap {MAX_FRAME}", offset + 4, ErrorCode.FRAME_TOO_LARGE)
    return mtype, length - 1


def decode(buf: bytes | memoryview, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame at ``offset``; returns (message, offset after the frame).
    Any malformation raises :class:`ProtocolError`."""
    buf = memoryview(buf)
    mtype, plen = read_header(buf, offset)
    start = offset + HEADER
    if start + plen > len(buf):
        raise ProtocolError(f"truncated frame: payload needs {plen} bytes, {len(buf) - start} present", start)
    return decode_payload(mtype, buf, start, start + plen), start + plen


def decode_exact(buf: bytes) -> Message:
    msg, end = decode(buf)
    if end != len(buf):
        raise ProtocolError("trailing bytes after frame", end)
    return msg


def tensor_f32(x) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(arr, dtype=arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32)
