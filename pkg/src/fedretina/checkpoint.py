"""Binary checkpoint format and the tensor encoding shared with the wire protocol.

Layout (all integers little-endian):
    magic b"FDCK" | u16 version | u32 round | 32-byte config hash | u32 tensor count
    per tensor: u16 name length + UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 ndim
                | ndim x u32 dims | raw little-endian data
"""
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Sequence, Tuple

import numpy as np

from fedretina.config import INPUT_SHAPE, NUM_CLASSES
from fedretina.errors import CheckpointError
from fedretina.model import LayerSpec, Model, build_model, default_specs
from fedretina.tensor_utils import ParameterSet

logger = logging.getLogger(__name__)

MAGIC = b"FDCK"
VERSION = 1
HASH_BYTES = 32
_HEADER = struct.Struct("<4sHI32sI")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

ErrorFactory = Callable[[str, int], Exception]


def encode_tensors(params: ParameterSet) -> bytes:
    """Per-tensor records without the count prefix."""
    chunks = []
    for name, array in params:
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def decode_tensors(buffer: bytes, offset: int, count: int,
                   error: ErrorFactory = CheckpointError) -> Tuple[ParameterSet, int]:
    """Decode `count` tensor records starting at `offset`; returns the set and the end offset."""
    view = memoryview(buffer)

    def take(size: int, what: str) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise error(f"truncated {what}: need {size} bytes, have {len(view) - offset}", offset)
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        start = offset
        try:
            name = bytes(take(name_len, "tensor name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise error(f"tensor name is not UTF-8: {exc}", start) from exc
        code_offset = offset
        code, ndim = struct.unpack("<BB", take(2, "tensor dtype"))
        if code not in _CODE_DTYPES:
            raise error(f"unknown dtype code {code} for tensor {name!r}", code_offset)
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor dims"))
        dtype = _CODE_DTYPES[code]
        size = dtype.itemsize
        for dim in dims:
            size *= dim
        data = np.frombuffer(take(size, f"data of tensor {name!r}"), dtype=dtype).reshape(dims)
        entries.append((name, data.astype(dtype.newbyteorder("="))))
    try:
        params = ParameterSet(entries)
    except Exception as exc:
        raise error(str(exc), offset) from exc
    return params, offset


def encode_checkpoint(model: Model, round_index: int) -> bytes:
    state = model.state_dict()
    header = _HEADER.pack(MAGIC, VERSION, round_index, model.architecture_hash(), len(state))
    return header + encode_tensors(state)


def decode_checkpoint(buffer: bytes) -> Tuple[ParameterSet, int, bytes]:
    """Returns (state, round, config hash)."""
    if len(buffer) < _HEADER.size:
        raise CheckpointError(f"truncated header: {len(buffer)} of {_HEADER.size} bytes", len(buffer))
    magic, version, round_index, config_hash, count = _HEADER.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    state, end = decode_tensors(buffer, _HEADER.size, count)
    if end != len(buffer):
        raise CheckpointError(f"{len(buffer) - end} trailing bytes", end)
    return state, round_index, config_hash


def save_checkpoint(model: Model, round_index: int, path) -> int:
    """Write atomically; returns the number of bytes written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(model, round_index)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("saved checkpoint %s (round %d, %d bytes)", path, round_index, len(payload))
    return len(payload)


def load_checkpoint(path, specs: Sequence[LayerSpec] = None, input_shape=INPUT_SHAPE,
                    num_classes: int = NUM_CLASSES) -> Tuple[Model, int]:
    """Rebuild the model described by `specs` and load the stored state into it."""
    specs = default_specs() if specs is None else specs
    try:
        buffer = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}", 0) from exc
    state, round_index, config_hash = decode_checkpoint(buffer)
    dtype = state.arrays[0].dtype if len(state) else np.float32
    model = build_model(specs, seed=0, input_shape=input_shape, num_classes=num_classes, dtype=dtype)
    if config_hash != model.architecture_hash():
        raise CheckpointError("config hash does not match the requested architecture", 10)
    try:
        model.load_state(state)
    except Exception as exc:
        raise CheckpointError(f"stored tensors do not fit the architecture: {exc}", _HEADER.size) from exc
    return model.eval(), round_index
