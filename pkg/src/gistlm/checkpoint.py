"""Checkpoint format: JSON manifest plus one little-endian tensor blob.

A checkpoint is a directory holding ``manifest.json`` (config, tensor
tables with byte offsets, seed lineage, arbitrary extra metadata) and
``params.bin`` (the concatenated raw tensors). Writing the same params
twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

SCHEMA = "gistlm-ckpt-v1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def config_hash(obj: dict) -> str:
    """sha256 of the canonical JSON form of any config-like mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(
    directory: str | Path,
    params: ModelParams,
    *,
    extra: dict | None = None,
    seed_lineage: list | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(params.tensors)
    table = []
    offset = 0
    chunks: list[bytes] = []
    for name in names:
        arr = params.tensors[name]
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype_name}")
        raw = np.ascontiguousarray(arr.astype(_DTYPES[dtype_name])).tobytes()
        table.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    cfg = params.config.to_json()
    manifest = {
        "schema": SCHEMA,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed_lineage": seed_lineage or [],
        "extra": extra or {},
        "tensors": table,
    }
    (directory / "params.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("schema") != SCHEMA:
        raise CheckpointError(f"unknown checkpoint schema {manifest.get('schema')!r}")
    blob = (directory / "params.bin").read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for row in manifest["tensors"]:
        raw = blob[row["offset"]: row["offset"] + row["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[row["dtype"]]).reshape(row["shape"])
        tensors[row["name"]] = arr.astype(row["dtype"]).copy()
    cfg = ModelConfig.from_json(manifest["config"])
    return ModelParams(cfg, tensors), manifest
