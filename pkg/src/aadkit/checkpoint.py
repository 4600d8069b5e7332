"""Checkpoint container: JSON manifest + packed little-endian float64 blob.

A checkpoint directory holds `manifest.json` (config, metadata, and the
name/shape/offset table) and `params.bin` (tensors concatenated in manifest
order). The same container serializes linear-decoder states; the `kind`
field says how to rebuild the object.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigurationError, DataError
from .model import CATCNConfig, CATCNModel

FORMAT = "aadkit-checkpoint-v1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class Checkpoint:
    """In-memory checkpoint: arrays + config + free-form metadata."""

    def __init__(self, kind: str, config: dict, arrays: Dict[str, np.ndarray],
                 trainable: Dict[str, bool], metadata: Optional[dict] = None):
        self.kind = kind
        self.config = config
        self.arrays = arrays
        self.trainable = trainable
        self.metadata = dict(metadata or {})

    @classmethod
    def from_model(cls, model: CATCNModel, metadata: Optional[dict] = None) -> "Checkpoint":
        arrays, trainable = {}, {}
        for name, arr, is_param in model.state_arrays():
            arrays[name] = np.asarray(arr, dtype=np.float64).copy()
            trainable[name] = is_param
        return cls("catcn", model.config.to_dict(), arrays, trainable, metadata)

    def to_model(self, dtype=np.float64) -> CATCNModel:
        if self.kind != "catcn":
            raise ConfigurationError(f"checkpoint kind {self.kind!r} is not a CATCN model")
        model = CATCNModel(CATCNConfig.from_dict(self.config), seed=0, dtype=dtype)
        model.load_state(self.arrays)
        return model

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        offset = 0
        table = []
        chunks = []
        for name in self.arrays:
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            table.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "trainable": bool(self.trainable.get(name, True)),
            })
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        manifest = {
            "format": FORMAT,
            "kind": self.kind,
            "dtype": "<f8",
            "config": self.config,
            "metadata": self.metadata,
            "tensors": table,
        }
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (path / BLOB).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            manifest = json.loads((path / MANIFEST).read_text())
        except FileNotFoundError:
            raise DataError(f"no checkpoint manifest under {path}")
        if manifest.get("format") != FORMAT:
            raise DataError(f"unsupported checkpoint format {manifest.get('format')!r}")
        blob = (path / BLOB).read_bytes()
        arrays, trainable = {}, {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start)
            arrays[entry["name"]] = arr.reshape(shape).copy()
            trainable[entry["name"]] = entry.get("trainable", True)
        return cls(manifest.get("kind", "catcn"), manifest["config"], arrays,
                   trainable, manifest.get("metadata"))


def save_model(path, model: CATCNModel, metadata: Optional[dict] = None) -> Checkpoint:
    ckpt = Checkpoint.from_model(model, metadata)
    ckpt.save(path)
    return ckpt


def load_model(path, dtype=np.float64):
    ckpt = Checkpoint.load(path)
    return ckpt.to_model(dtype=dtype), ckpt.metadata
