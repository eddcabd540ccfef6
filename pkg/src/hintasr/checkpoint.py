"""Versioned checkpoint container: magic "SCJ1", a JSON manifest header with
(name, shape, byte offset) entries, then raw little-endian float64 arrays."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes
from .tensor import Tensor

MAGIC = b"SCJ1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig,
                    extras: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    """Write params (and optional extra arrays such as optimizer moments).

    Arrays are serialized in sorted-name order so identical states produce
    byte-identical files.
    """
    arrays = {name: t.array for name, t in params.items()}
    for name, arr in (extras or {}).items():
        arrays[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    manifest = []
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": cfg.to_dict(),
        "meta": meta or {},
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(blob)
        f.write(b"\n")
        for name in names:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; validates shapes against the stored ModelConfig.

    Returns (params, config, extras, meta).
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    nl = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC): nl].decode("utf-8"))
    data = raw[nl + 1:]
    cfg = ModelConfig(**header["config"])
    expected = param_shapes(cfg)
    tensors = {}
    extras = {}
    for entry in header["arrays"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data[start: start + size * 8], dtype="<f8").astype(np.float64)
        if arr.size != size:
            raise CheckpointError(f"{path}: truncated array {name}")
        if name.startswith("extra."):
            extras[name[len("extra."):]] = arr.reshape(shape)
        else:
            if name not in expected:
                raise CheckpointError(f"{path}: unknown parameter {name}")
            if shape != expected[name]:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: file {shape} vs config {expected[name]}")
            tensors[name] = Tensor(arr.reshape(shape), requires_grad=True)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:4]}...")
    # keep deterministic (creation) order for the parameter map
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(ordered), cfg, extras, header.get("meta", {})
