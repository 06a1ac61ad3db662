"""Framed binary message protocol between the federation server and institutions.

Frame: magic b"FDRL" | u8 version | u8 message type | u32 payload length | payload.
All integers are little-endian; strings are u32 length + UTF-8. Parameter
sets use the checkpoint tensor encoding behind a u32 tensor count.
Decoding also rejects round 0, n_k = 0, empty client ids and strings
with control characters.
See PROTOCOL.md for worked examples.
"""
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

from fedretina.checkpoint import decode_tensors, encode_tensors
from fedretina.errors import DecodeError
from fedretina.tensor_utils import ParameterSet

MAGIC = b"FDRL"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10


class MsgType(IntEnum):
    # pairwise Hamming distance >= 2: a single bit flip never yields another valid type
    HELLO = 0x11
    GLOBAL_MODEL = 0x22
    CLIENT_UPDATE = 0x44
    ACK = 0x88
    SHUTDOWN = 0xF0


@dataclass(frozen=True)
class Hello:
    client_id: str
    n_k: int


@dataclass(frozen=True)
class GlobalModel:
    round: int
    params: ParameterSet


@dataclass(frozen=True)
class ClientUpdate:
    round: int
    client_id: str
    n_k: int
    params: ParameterSet
    val_loss: float


@dataclass(frozen=True)
class Ack:
    round: int


@dataclass(frozen=True)
class Shutdown:
    reason: str


Message = Union[Hello, GlobalModel, ClientUpdate, Ack, Shutdown]

_TYPES = {Hello: MsgType.HELLO, GlobalModel: MsgType.GLOBAL_MODEL, ClientUpdate: MsgType.CLIENT_UPDATE,
          Ack: MsgType.ACK, Shutdown: MsgType.SHUTDOWN}


def _string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _tensor_block(params: ParameterSet) -> bytes:
    return struct.pack("<I", len(params)) + encode_tensors(params)


def encode_payload(message: Message) -> bytes:
    if isinstance(message, Hello):
        return _string(message.client_id) + struct.pack("<I", message.n_k)
    if isinstance(message, GlobalModel):
        return struct.pack("<I", message.round) + _tensor_block(message.params)
    if isinstance(message, ClientUpdate):
        return (struct.pack("<I", message.round) + _string(message.client_id)
                + struct.pack("<Id", message.n_k, message.val_loss) + _tensor_block(message.params))
    if isinstance(message, Ack):
        return struct.pack("<I", message.round)
    if isinstance(message, Shutdown):
        return _string(message.reason)
    raise TypeError(f"not a protocol message: {message!r}")


def encode(message: Message) -> bytes:
    payload = encode_payload(message)
    return HEADER.pack(MAGIC, VERSION, _TYPES[type(message)], len(payload)) + payload


def decode_header(header: bytes, max_payload: int = None) -> Tuple[MsgType, int]:
    """Validate a 10-byte header; returns (type, payload length)."""
    if len(header) < HEADER_SIZE:
        raise DecodeError(f"truncated header: {len(header)} of {HEADER_SIZE} bytes", len(header))
    magic, version, msg_type, length = HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise DecodeError(f"unknown message type 0x{msg_type:02x}", 5) from None
    if max_payload is not None and length > max_payload:
        raise DecodeError(f"payload of {length} bytes exceeds the {max_payload}-byte limit", 6)
    return kind, length


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise DecodeError(f"truncated {what}", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def string(self, what: str) -> str:
        length = self.u32(f"{what} length")
        start = self.offset
        try:
            text = self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"{what} is not UTF-8", start) from exc
        if not text.isprintable():
            raise DecodeError(f"{what} contains control characters", start)
        return text

    def client_id(self) -> str:
        start = self.offset
        client_id = self.string("client id")
        if not client_id:
            raise DecodeError("empty client id", start)
        return client_id

    def round(self) -> int:
        start = self.offset
        value = self.u32("round")
        if value < 1:
            raise DecodeError("round 0 (rounds start at 1)", start)
        return value

    def count(self, what: str) -> int:
        start = self.offset
        value = self.u32(what)
        if value < 1:
            raise DecodeError(f"{what} must be >= 1", start)
        return value

    def tensors(self) -> ParameterSet:
        count = self.u32("tensor count")
        params, self.offset = decode_tensors(self.data, self.offset, count, error=DecodeError)
        return params


def _decode_body(kind: MsgType, frame: bytes) -> Message:
    reader = _Reader(frame, HEADER_SIZE)
    if kind == MsgType.HELLO:
        message = Hello(reader.client_id(), reader.count("n_k"))
    elif kind == MsgType.GLOBAL_MODEL:
        message = GlobalModel(reader.round(), reader.tensors())
    elif kind == MsgType.CLIENT_UPDATE:
        round_index = reader.round()
        client_id = reader.client_id()
        n_k = reader.count("n_k")
        val_loss = reader.f64("validation loss")
        message = ClientUpdate(round_index, client_id, n_k, reader.tensors(), val_loss)
    elif kind == MsgType.ACK:
        message = Ack(reader.round())
    else:
        message = Shutdown(reader.string("reason"))
    if reader.offset != len(frame):
        raise DecodeError(f"{len(frame) - reader.offset} trailing payload bytes", reader.offset)
    return message


def decode(data: bytes) -> Message:
    kind, length = decode_header(data)
    if len(data) - HEADER_SIZE != length:
        raise DecodeError(f"header declares {length} payload bytes, frame carries {len(data) - HEADER_SIZE}", 6)
    return _decode_body(kind, bytes(data))
