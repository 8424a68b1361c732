"""Checkpoints: a JSON manifest next to a raw little-endian float32 blob.

The manifest lists every tensor with its shape and byte range in the blob.
Both files are written to temporaries and renamed into place, blob first.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .model import CaptionModel, ModelConfig, param_shapes
from .tensor import Tensor

FORMAT = "mergecap-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def tensor_inventory(params: dict) -> list[dict]:
    """Name, shape and byte range of each tensor in blob order."""
    table = []
    offset = 0
    for name, p in params.items():
        shape = list(p.shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        table.append({"name": name, "shape": shape, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return table


def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def save_checkpoint(params: dict, meta: dict, path) -> None:
    path = Path(path)
    blob_path = _blob_path(path)
    inventory = tensor_inventory(params)
    manifest = {"format": FORMAT, "version": VERSION, **meta,
                "blob": blob_path.name, "blob_bytes": sum(t["nbytes"] for t in inventory),
                "tensors": inventory}
    tmp_blob = blob_path.with_name(blob_path.name + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for p in params.values():
            data = p.data if isinstance(p, Tensor) else np.asarray(p)
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    tmp_manifest = path.with_name(path.name + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    os.replace(tmp_blob, blob_path)
    os.replace(tmp_manifest, path)


def load_checkpoint(path, dtype=np.float64) -> tuple[dict[str, Tensor], dict]:
    """Returns ``(params, manifest)``; params are leaf tensors that require grad."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    config = ModelConfig.from_dict(manifest["model_config"])
    expected = param_shapes(config)
    blob = (path.parent / manifest["blob"]).read_bytes()

    entries = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name in entries:
            raise CheckpointError(f"{path}: tensor {name} listed twice")
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        entries[name] = entry
    params = {}
    cursor = 0
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointError(f"{path}: missing tensor {name}")
        entry = entries[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tuple(entry['shape'])}, "
                                  f"model config implies {shape}")
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != int(np.prod(shape)) * 4 or offset != cursor:
            raise CheckpointError(f"{path}: tensor {name} has a bad byte range "
                                  f"[{offset}, {offset + nbytes}), expected start {cursor}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob truncated at byte offset {len(blob)}; tensor {name} "
                                  f"needs bytes [{offset}, {offset + nbytes})")
        data = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        params[name] = Tensor(data.reshape(shape).astype(dtype), requires_grad=True, name=name)
        cursor = offset + nbytes
    if cursor != len(blob):
        raise CheckpointError(f"{path}: blob has {len(blob) - cursor} unexpected bytes at byte offset {cursor}")
    return params, manifest


def load_model(path, dtype=np.float64) -> tuple[CaptionModel, dict]:
    params, manifest = load_checkpoint(path, dtype)
    return CaptionModel(ModelConfig.from_dict(manifest["model_config"]), params), manifest


def write_manifest(path, payload: dict) -> None:
    """Write a run manifest (resolved configuration) as pretty JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
