"""Self-describing weight checkpoints.

A checkpoint is a single JSON document: a format-version field, the full
model configuration, and one entry per registry key carrying the tensor shape
plus the raw little-endian float64 payload (base64). Round-trips are
bit-exact and files are byte-identical for identical weights.
"""
from __future__ import annotations

import base64
import json

import numpy as np

from .config import ModelConfig
from .model import WeightRegistry, build_registry

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, registry: WeightRegistry, cfg: ModelConfig) -> None:
    weights = {}
    for key, values in registry.state_dict().items():
        raw = np.ascontiguousarray(values, dtype="<f8").tobytes()
        weights[key] = {
            "shape": list(values.shape),
            "data": base64.b64encode(raw).decode("ascii"),
        }
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": cfg.to_jsonable(),
        "weights": weights,
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_checkpoint(path) -> tuple[ModelConfig, WeightRegistry]:
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}")
    if "model" not in doc or "weights" not in doc:
        raise CheckpointError(f"{path}: missing model or weights section")
    cfg = ModelConfig.from_jsonable(doc["model"])
    state = {}
    for key, entry in doc["weights"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise CheckpointError(f"{path}: payload size mismatch for {key!r}")
        state[key] = arr.reshape(shape)
    registry = build_registry(cfg, seed=0)
    missing = set(registry.keys()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: checkpoint missing keys, e.g. {sorted(missing)[:3]}")
    registry.load_state_dict(state)
    return cfg, registry
