"""Checkpoint container: named parameters, config manifest, optimizer state.

A checkpoint is a JSON manifest (architecture config, array table, run
metadata) followed by raw little-endian array payloads. Round-trips are
bit-exact. Averaging loads several checkpoints with identical manifests
and takes the arithmetic per-parameter mean, discarding optimizer state.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import BadMagicError, DataError, TruncatedFileError, VersionError

MAGIC = b"D2CK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f4": "<f4", "f8": "<f8"}


@dataclass
class CheckpointData:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    optim: Optional[dict]
    meta: dict


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise DataError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(path, params: Dict[str, np.ndarray], cfg: ModelConfig,
                    optim_state: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    arrays: Dict[str, np.ndarray] = {f"model.{k}": v for k, v in params.items()}
    manifest_meta = dict(meta or {})
    if optim_state is not None:
        names = list(params)
        if len(names) != len(optim_state["m"]):
            raise DataError("optimizer state does not align with parameters")
        for name, m, v in zip(names, optim_state["m"], optim_state["v"]):
            arrays[f"optim.m.{name}"] = m
            arrays[f"optim.v.{name}"] = v
        manifest_meta["optim_step_count"] = int(optim_state["step_count"])
        manifest_meta["optim_micro_count"] = int(optim_state["micro_count"])
        manifest_meta["has_optimizer"] = True

    table = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _dtype_code(arr)
        table.append({"name": name, "shape": list(arr.shape),
                      "dtype": code, "offset": offset})
        offset += arr.size * arr.itemsize
    manifest = {
        "config": dataclasses.asdict(cfg),
        "arrays": table,
        "meta": manifest_meta,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for entry in table:
            arr = np.ascontiguousarray(arrays[entry["name"]])
            fh.write(arr.astype(_DTYPES[entry["dtype"]], copy=False).tobytes())


def _load_manifest(blob: bytes, path) -> tuple:
    if len(blob) < _PREFIX.size:
        raise TruncatedFileError(f"{path}: shorter than the checkpoint prefix")
    magic, version, manifest_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}")
    start = _PREFIX.size
    if len(blob) < start + manifest_len:
        raise TruncatedFileError(f"{path}: manifest cut short")
    manifest = json.loads(blob[start:start + manifest_len].decode("utf-8"))
    return manifest, start + manifest_len


def load_checkpoint(path) -> CheckpointData:
    blob = Path(path).read_bytes()
    manifest, payload_start = _load_manifest(blob, path)
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"{path}: unknown dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = payload_start + entry["offset"]
        end = start + count * np.dtype(dtype).itemsize
        if end > len(blob):
            raise TruncatedFileError(
                f"{path}: array {entry['name']} extends past end of file")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=start
        ).reshape(entry["shape"]).copy()

    params = {k[len("model."):]: v for k, v in arrays.items()
              if k.startswith("model.")}
    meta = manifest.get("meta", {})
    optim = None
    if meta.get("has_optimizer"):
        optim = {
            "m": {k[len("optim.m."):]: v for k, v in arrays.items()
                  if k.startswith("optim.m.")},
            "v": {k[len("optim.v."):]: v for k, v in arrays.items()
                  if k.startswith("optim.v.")},
            "step_count": meta["optim_step_count"],
            "micro_count": meta["optim_micro_count"],
        }
    cfg = ModelConfig(**manifest["config"])
    return CheckpointData(cfg, params, optim, meta)


def aligned_optim_state(data: CheckpointData, param_names: Sequence[str]) -> dict:
    """Rebuild Adam's positional state lists in the model's parameter order."""
    if data.optim is None:
        raise DataError("checkpoint carries no optimizer state")
    missing = [n for n in param_names if n not in data.optim["m"]]
    if missing:
        raise DataError(f"optimizer state missing for parameters {missing[:5]}")
    return {
        "m": [data.optim["m"][n] for n in param_names],
        "v": [data.optim["v"][n] for n in param_names],
        "step_count": data.optim["step_count"],
        "micro_count": data.optim["micro_count"],
    }


def parameter_manifest(data: CheckpointData) -> List[tuple]:
    return sorted((name, tuple(arr.shape)) for name, arr in data.params.items())


def average_checkpoints(paths: Sequence) -> CheckpointData:
    """Arithmetic per-parameter mean; optimizer state is discarded."""
    if not paths:
        raise DataError("no checkpoints to average")
    loaded = [load_checkpoint(p) for p in paths]
    reference = parameter_manifest(loaded[0])
    ref_config = dataclasses.asdict(loaded[0].config)
    for p, data in zip(paths[1:], loaded[1:]):
        if parameter_manifest(data) != reference:
            raise DataError(f"{p}: parameter manifest differs from {paths[0]}")
        if dataclasses.asdict(data.config) != ref_config:
            raise DataError(f"{p}: model config differs from {paths[0]}")
    averaged = {}
    for name in loaded[0].params:
        stacked = np.stack([d.params[name].astype(np.float64) for d in loaded])
        averaged[name] = stacked.mean(axis=0).astype(loaded[0].params[name].dtype)
    return CheckpointData(loaded[0].config, averaged, None,
                          {"averaged_from": len(loaded)})
