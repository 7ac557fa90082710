"""
💾 FSPM CHECKPOINTS
Little-endian layout:

    magic   4s   b"FSPM"
    version u16  1
    count   u32
    per tensor:
        u16 name length, ASCII name, u8 rank, rank x u32 extents, float32 payload

Names carry their role by prefix: "theta." / "phi." parameters,
"registry.<class_id>" prototypes and "meta.<key>" run metadata (byte strings
stored one byte per float32 value).
"""
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from autograd.tensor import Tensor
from utils.exceptions import DataError

from .network import PHI, THETA, ModelParams, infer_config
from .objectives import PrototypeRegistry

logger = logging.getLogger(__name__)

MAGIC = b"FSPM"
VERSION = 1
HEADER = struct.Struct("<4sHI")
NAME_LENGTH = struct.Struct("<H")
RANK = struct.Struct("<B")
EXTENT = struct.Struct("<I")
PAYLOAD = np.dtype("<f4")
REGISTRY = "registry."
META = "meta."


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    registry: PrototypeRegistry
    meta: dict = field(default_factory=dict)

    def meta_text(self, key, default=None):
        value = self.meta.get(key)
        return value.decode("utf-8") if value is not None else default


def _meta_tensor(value):
    if isinstance(value, int):
        value = str(value)
    if isinstance(value, str):
        value = value.encode("utf-8")
    return np.frombuffer(bytes(value), dtype=np.uint8).astype(np.float32)


def encode_checkpoint(params, registry, meta=None):
    named = OrderedDict((name, tensor.data) for name, tensor in params.named().items())
    for class_id in registry.classes:
        named[f"{REGISTRY}{class_id}"] = registry.get(class_id)
    for key in sorted(meta or {}):
        named[f"{META}{key}"] = _meta_tensor(meta[key])

    chunks = [HEADER.pack(MAGIC, VERSION, len(named))]
    for name, array in named.items():
        encoded = name.encode("ascii")
        array = np.ascontiguousarray(array, dtype=PAYLOAD)
        chunks.append(NAME_LENGTH.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(RANK.pack(array.ndim))
        chunks.extend(EXTENT.pack(extent) for extent in array.shape)
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_tensors(buffer):
    """Parse FSPM bytes into an ordered name -> float32 array table."""
    buffer = memoryview(buffer)
    if len(buffer) < HEADER.size:
        raise CorruptCheckpointError(f"header needs {HEADER.size} bytes, got {len(buffer)}")
    magic, version, count = HEADER.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"expected magic {MAGIC!r}, got {bytes(magic)!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")

    offset = HEADER.size
    tensors = OrderedDict()

    def take(size, what):
        nonlocal offset
        if offset + size > len(buffer):
            raise CorruptCheckpointError(f"tensor table truncated while reading {what} at byte {offset}")
        start = offset
        offset += size
        return start

    for index in range(count):
        (name_length,) = NAME_LENGTH.unpack_from(buffer, take(NAME_LENGTH.size, "name length"))
        start = take(name_length, "name")
        try:
            name = bytes(buffer[start:start + name_length]).decode("ascii")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor {index} has a non-ASCII name") from exc
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = RANK.unpack_from(buffer, take(RANK.size, "rank"))
        shape = tuple(EXTENT.unpack_from(buffer, take(EXTENT.size, "extent"))[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = take(size * PAYLOAD.itemsize, f"payload of {name}")
        tensors[name] = np.frombuffer(buffer, dtype=PAYLOAD, count=size, offset=start).reshape(shape).astype(np.float32)
    if offset != len(buffer):
        raise CorruptCheckpointError(f"{len(buffer) - offset} trailing bytes after tensor table")
    return tensors


def decode_checkpoint(buffer, momentum=0.9):
    tensors = decode_tensors(buffer)
    params_table = OrderedDict()
    registry = PrototypeRegistry(momentum)
    meta = {}
    for name, array in tensors.items():
        if name.startswith((THETA, PHI)):
            params_table[name] = Tensor(array, requires_grad=True, name=name)
        elif name.startswith(REGISTRY):
            try:
                class_id = int(name[len(REGISTRY):])
            except ValueError as exc:
                raise CorruptCheckpointError(f"bad registry entry name {name!r}") from exc
            registry.set(class_id, array)
        elif name.startswith(META):
            meta[name[len(META):]] = array.astype(np.uint8).tobytes()
        else:
            raise CorruptCheckpointError(f"tensor {name!r} has no known prefix")
    if not params_table:
        raise CorruptCheckpointError("checkpoint holds no parameters")
    params = ModelParams.from_named(infer_config(params_table), params_table)
    return Checkpoint(params=params, registry=registry, meta=meta)


def save_checkpoint(params, registry, path, meta=None):
    path = Path(path)
    data = encode_checkpoint(params, registry, meta)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info(f"💾 Saved checkpoint {path} ({len(data)} bytes, {len(registry)} registry entries)")
    return path


def load_checkpoint(path, momentum=0.9):
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buffer, momentum)
