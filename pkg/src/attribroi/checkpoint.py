"""Model checkpoints: a JSON manifest plus one ATSR blob of packed parameters.

The manifest records the model config and, per named parameter, its shape
and offset into the flat float64 blob. Parameters are packed in sorted name
order so identical weights always give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io
from .exceptions import ParseError
from .model import MiniHViT, ModelConfig

BLOB_SUFFIX = ".atsr"


def _blob_path(manifest_path):
    manifest_path = Path(manifest_path)
    return manifest_path.with_name(manifest_path.stem + BLOB_SUFFIX)


def save_checkpoint(path, model: MiniHViT, extra=None):
    """Write ``path`` (JSON manifest) and its sibling ``.atsr`` blob."""
    state = model.state_dict()
    index, chunks, offset = {}, [], 0
    for name in sorted(state):
        arr = state[name]
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.ravel())
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    blob = _blob_path(path)
    io.write_tensor(blob, flat)
    manifest = {
        "schema_version": io.SCHEMA_VERSION,
        "model": model.config.to_dict(),
        "blob": blob.name,
        "parameters": index,
    }
    if extra:
        manifest["extra"] = extra
    io.write_json(path, manifest)
    return Path(path)


def load_checkpoint(path) -> MiniHViT:
    path = Path(path)
    manifest = io.read_json(path)
    if manifest.get("schema_version") != io.SCHEMA_VERSION:
        raise ParseError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")
    flat = io.read_tensor(path.with_name(manifest["blob"]))
    state = {}
    for name, entry in manifest["parameters"].items():
        shape = tuple(entry["shape"])
        start = entry["offset"]
        size = int(np.prod(shape))
        if start < 0 or start + size > flat.size:
            raise ParseError(f"{path}: parameter {name} runs past the end of the blob")
        state[name] = flat[start:start + size].reshape(shape)
    model = MiniHViT(ModelConfig.from_dict(manifest["model"]))
    model.load_state_dict(state)
    return model
