"""
💾 FSV1 VOLUME FILES
Little-endian layout, no padding, no checksum:

    magic   4s   b"FSV1"
    dtype   u8   0 = float32, 1 = uint8
    kind    u8   0 = image, 1 = full mask, 2 = box mask
    rank    u8   always 3
    extents 3 x u32  (D, H, W)
    payload row-major, W fastest
"""
import logging
import struct
from pathlib import Path

import numpy as np

from utils.exceptions import DataError

from .records import LabelMask, Volume, VolumeKind

logger = logging.getLogger(__name__)

MAGIC = b"FSV1"
HEADER = struct.Struct("<4sBBB")
EXTENT = struct.Struct("<I")
RANK = 3
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MAX_EXTENT = 0xFFFFFFFF
# Largest payload this process will try to allocate.
MAX_VOXELS = 2 ** 31 - 1


class FormatError(DataError):
    """Malformed FSV1 data."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


def encode_volume(record):
    """Serialize a Volume or LabelMask to FSV1 bytes."""
    if isinstance(record, Volume):
        dtype_code, kind, payload = 0, VolumeKind.IMAGE, record.voxels
    elif isinstance(record, LabelMask):
        dtype_code, kind, payload = 1, record.kind, record.labels
    else:
        raise FormatError(f"cannot encode {type(record).__name__} as FSV1")
    if any(extent > MAX_EXTENT for extent in payload.shape):
        raise DimOverflowError(f"extents {payload.shape} do not fit in u32")
    header = HEADER.pack(MAGIC, dtype_code, int(kind), RANK)
    extents = b"".join(EXTENT.pack(extent) for extent in payload.shape)
    return header + extents + np.ascontiguousarray(payload, dtype=DTYPES[dtype_code]).tobytes()


def decode_volume(buffer):
    """Parse FSV1 bytes back into a Volume or LabelMask."""
    buffer = memoryview(buffer)
    if len(buffer) < HEADER.size:
        raise TruncatedPayloadError(f"header needs {HEADER.size} bytes, got {len(buffer)}")
    magic, dtype_code, kind_code, rank = HEADER.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {bytes(magic)!r}")
    if dtype_code not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {dtype_code}")
    if kind_code not in VolumeKind.values:
        raise FormatError(f"unknown kind code {kind_code}")
    if rank != RANK:
        raise FormatError(f"rank must be {RANK}, got {rank}")

    offset = HEADER.size
    if len(buffer) < offset + RANK * EXTENT.size:
        raise TruncatedPayloadError("extent table is truncated")
    dims = tuple(EXTENT.unpack_from(buffer, offset + i * EXTENT.size)[0] for i in range(RANK))
    offset += RANK * EXTENT.size

    voxels = 1
    for extent in dims:
        voxels *= extent
    if voxels > MAX_VOXELS:
        raise DimOverflowError(f"extents {dims} describe {voxels} voxels")

    dtype = DTYPES[dtype_code]
    expected = voxels * dtype.itemsize
    available = len(buffer) - offset
    if available < expected:
        raise TruncatedPayloadError(f"payload holds {available} of {expected} bytes")
    if available > expected:
        raise FormatError(f"{available - expected} trailing bytes after payload")

    data = np.frombuffer(buffer, dtype=dtype, count=voxels, offset=offset).reshape(dims)
    kind = VolumeKind(kind_code)
    if kind == VolumeKind.IMAGE:
        if dtype_code != 0:
            raise FormatError("image records must be float32")
        return Volume(data.astype(np.float32))
    if dtype_code != 1:
        raise FormatError("mask records must be uint8")
    return LabelMask(data.copy(), kind)


def write_volume(path, record):
    path = Path(path)
    data = encode_volume(record)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    logger.debug(f"wrote {path} ({type(record).__name__}, dims {record.dims})")


def read_volume(path):
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode_volume(buffer)
