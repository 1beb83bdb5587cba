"""D2PF: the binary container for per-sentence visual feature matrices.

Layout (all integers little-endian):

    bytes 0..3    magic "D2PF"
    bytes 4..7    u32 version (currently 1)
    bytes 8..11   u32 dtype code (1 = float32 little-endian)
    bytes 12..15  u32 K, rows per record
    bytes 16..19  u32 D, columns per record
    bytes 20..27  u64 record count R
    then R index entries of (u64 sentence_id, u64 absolute offset)
    then R records of K*D*4 bytes, row-major float32

Offsets are strictly increasing and every record must lie inside the
file. Writing then reading is bit-exact; floats are stored little-endian
regardless of platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

from .errors import (BadMagicError, DataError, IndexInconsistencyError,
                     TruncatedFileError, VersionError)

MAGIC = b"D2PF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIIIQ")
_INDEX_ENTRY = struct.Struct("<QQ")

SOURCE_TAGS = ("authentic", "reconstructed", "noise")


@dataclass
class FeatureRecord:
    """One sentence's K x D visual feature matrix."""

    sentence_id: int
    source_tag: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.source_tag not in SOURCE_TAGS:
            raise DataError(f"unknown source tag {self.source_tag!r}")
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise DataError(
                f"feature matrix must be 2-D, got shape {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise DataError(
                f"non-finite feature values for sentence {self.sentence_id}")


def write_d2pf(path, matrices: Dict[int, np.ndarray]) -> None:
    """Write sentence_id -> K x D float32 matrices in ascending id order."""
    if not matrices:
        raise DataError("refusing to write an empty feature file")
    ids = sorted(matrices)
    first = np.asarray(matrices[ids[0]])
    if first.ndim != 2:
        raise DataError(f"feature matrices must be 2-D, got {first.shape}")
    k, d = first.shape
    record_size = k * d * 4
    count = len(ids)
    data_start = _HEADER.size + count * _INDEX_ENTRY.size

    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, k, d, count))
        for i, sid in enumerate(ids):
            fh.write(_INDEX_ENTRY.pack(sid, data_start + i * record_size))
        for sid in ids:
            matrix = np.asarray(matrices[sid], dtype=np.float32)
            if matrix.shape != (k, d):
                raise DataError(
                    f"sentence {sid}: matrix {matrix.shape} != header {(k, d)}")
            if not np.isfinite(matrix).all():
                raise DataError(f"sentence {sid}: non-finite feature values")
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def _read_header(blob: bytes, path) -> Tuple[int, int, int, int]:
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    magic, version, dtype, k, d, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: version {version}, expected {VERSION}")
    if dtype != DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype}")
    if k < 1 or d < 1 or count < 1:
        raise DataError(f"{path}: degenerate geometry K={k} D={d} count={count}")
    return k, d, count, _HEADER.size


def read_d2pf(path, source_tag: str = "authentic") -> List[FeatureRecord]:
    """Load every record; raises a distinct error kind per format violation."""
    blob = Path(path).read_bytes()
    k, d, count, pos = _read_header(blob, path)
    record_size = k * d * 4
    index: List[Tuple[int, int]] = []
    index_end = pos + count * _INDEX_ENTRY.size
    if len(blob) < index_end:
        raise TruncatedFileError(f"{path}: index cut short")
    for i in range(count):
        sid, offset = _INDEX_ENTRY.unpack_from(blob, pos + i * _INDEX_ENTRY.size)
        index.append((sid, offset))

    previous = -1
    records = []
    for sid, offset in index:
        if offset <= previous:
            raise IndexInconsistencyError(
                f"{path}: offsets not strictly increasing at sentence {sid}")
        if offset < index_end:
            raise IndexInconsistencyError(
                f"{path}: offset {offset} points inside the index")
        if offset + record_size > len(blob):
            raise TruncatedFileError(
                f"{path}: record for sentence {sid} extends past end of file")
        previous = offset
        matrix = np.frombuffer(blob, dtype="<f4", count=k * d,
                               offset=offset).reshape(k, d).copy()
        records.append(FeatureRecord(sid, source_tag, matrix))
    expected_size = index_end + count * record_size
    if len(blob) != expected_size:
        raise TruncatedFileError(
            f"{path}: size {len(blob)} != expected {expected_size}")
    return records


def validate_d2pf(path) -> dict:
    """Full structural check; returns header facts for reporting."""
    records = read_d2pf(path)
    k, d = records[0].matrix.shape
    return {"records": len(records), "K": k, "D": d, "version": VERSION}


def records_to_dict(records: Iterable[FeatureRecord]) -> Dict[int, np.ndarray]:
    return {r.sentence_id: r.matrix for r in records}
