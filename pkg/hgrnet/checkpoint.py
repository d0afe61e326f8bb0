"""Versioned binary container for model weights and optimizer state.

Layout (all integers little-endian)::

    b"HGRN" | u16 version | u32 metadata length | metadata (sorted-key JSON, UTF-8)
    | u32 record count | records...

    record = u16 name length | name (UTF-8) | u8 dtype tag | u8 rank | u32 dims[rank] | raw values
"""
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from hgrnet.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"HGRN"
FORMAT_VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


def encode_checkpoint(records: Mapping[str, np.ndarray], metadata: Dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(records))]
    for name, array in records.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name}: unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_TAGS[dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    view = memoryview(blob)
    offset = 0

    def take(count: int) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: not an HGRN checkpoint")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    try:
        metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{source}: corrupt metadata block: {e}") from e
    (count,) = struct.unpack("<I", take(4))
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{source}: tensor {name} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = TAG_DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(size * dtype.itemsize), dtype=dtype).reshape(dims).copy()
        records[name] = data
    if offset != len(view):
        raise CheckpointError(f"{source}: {len(view) - offset} trailing bytes after the last record")
    return metadata, records


def write_checkpoint(path: Union[str, Path], records: Mapping[str, np.ndarray], metadata: Dict) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(records, metadata)
    path.write_bytes(blob)
    logger.info(f"Wrote checkpoint {path} ({len(records)} tensors, {len(blob):,} bytes)")
    return len(blob)


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
