"""Standalone writer/reader for the D2PF feature container.

This mirrors the published byte layout exactly so consumers can load the
files without sharing code with this package:

    bytes 0..3    magic "D2PF"
    bytes 4..7    u32 version (1)
    bytes 8..11   u32 dtype code (1 = float32 little-endian)
    bytes 12..15  u32 K (rows per record)
    bytes 16..19  u32 D (columns per record)
    bytes 20..27  u64 record count R
    R x (u64 sentence_id, u64 absolute offset) index entries
    R x (K*D*4 bytes) row-major float32 records

Offsets are strictly increasing, records contiguous, floats always
little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"D2PF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIIIQ")
_INDEX_ENTRY = struct.Struct("<QQ")


class ContainerError(ValueError):
    pass


def write_container(path, matrices: Dict[int, np.ndarray]) -> None:
    """Write sentence_id -> [K, D] float32 matrices in ascending id order."""
    if not matrices:
        raise ContainerError("nothing to write")
    ids = sorted(matrices)
    k, d = np.asarray(matrices[ids[0]]).shape
    record_size = k * d * 4
    data_start = _HEADER.size + len(ids) * _INDEX_ENTRY.size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, k, d, len(ids)))
        for i, sid in enumerate(ids):
            fh.write(_INDEX_ENTRY.pack(sid, data_start + i * record_size))
        for sid in ids:
            matrix = np.asarray(matrices[sid], dtype=np.float32)
            if matrix.shape != (k, d):
                raise ContainerError(
                    f"sentence {sid}: shape {matrix.shape} != {(k, d)}")
            if not np.isfinite(matrix).all():
                raise ContainerError(f"sentence {sid}: non-finite values")
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_container(path) -> Dict[int, np.ndarray]:
    """Strict reader used by this package's own round-trip tests."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, dtype, k, d, count = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_F32:
        raise ContainerError(f"{path}: bad header {(magic, version, dtype)}")
    pos = _HEADER.size
    record_size = k * d * 4
    out: Dict[int, np.ndarray] = {}
    previous = -1
    for i in range(count):
        sid, offset = _INDEX_ENTRY.unpack_from(blob, pos + i * _INDEX_ENTRY.size)
        if offset <= previous or offset + record_size > len(blob):
            raise ContainerError(f"{path}: bad offset for sentence {sid}")
        previous = offset
        out[sid] = np.frombuffer(blob, dtype="<f4", count=k * d,
                                 offset=offset).reshape(k, d).copy()
    return out
