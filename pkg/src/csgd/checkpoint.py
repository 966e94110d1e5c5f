"""Checkpoint format: ``manifest.json`` plus a ``tensors.bin`` blob.

The blob is the concatenation of every tensor as little-endian float32; the
manifest records the network spec and, per tensor, its name, shape, dtype,
byte offset and byte length.
"""
from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, NetworkSpec, make_params, param_shapes

FORMAT = "csgd-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in model.named_tensors().items():
        raw = np.ascontiguousarray(t.data, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "<f4",
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "spec": model.spec.to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {path}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT}: format={manifest.get('format')!r}")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r} "
                              f"(expected {VERSION})")
    return manifest


def _read_tensors(path: Path, manifest: dict) -> dict[str, np.ndarray]:
    blob = (path / BLOB).read_bytes()
    out = {}
    spans = []
    for e in manifest["tensors"]:
        name, shape, off, length = e["name"], tuple(e["shape"]), e["offset"], e["length"]
        if e.get("dtype") != "<f4":
            raise CheckpointError(f"{name}: unsupported dtype {e.get('dtype')!r}")
        if length != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{name}: length {length} does not match shape {shape}")
        if off < 0 or off + length > len(blob):
            raise CheckpointError(f"{name}: bytes [{off}, {off + length}) outside blob of {len(blob)}")
        spans.append((off, off + length, name))
        out[name] = np.frombuffer(blob, dtype=_LE_F32, count=length // 4, offset=off) \
            .reshape(shape).astype(np.float32)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensors {an} and {bn} overlap in the blob")
    return out


def load_checkpoint(path, model: Optional[Model] = None) -> Model:
    """Load a checkpoint; into ``model`` (shapes must match) or into a fresh one."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = _read_tensors(path, manifest)
    if model is not None:
        tensors = model.named_tensors()
        missing = sorted(set(tensors) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors {missing}")
        for name, t in tensors.items():
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} "
                                      f"!= model shape {t.shape}")
        for name, t in tensors.items():
            t.data = arrays[name].copy()
        return model
    spec = NetworkSpec.from_dict(manifest["spec"])
    nested: dict[str, dict[str, np.ndarray]] = {}
    for lid, shapes in param_shapes(spec).items():
        nested[lid] = {}
        for pname, shape in shapes.items():
            key = f"{lid}.{pname}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            if arrays[key].shape != shape:
                raise CheckpointError(f"{key}: checkpoint shape {arrays[key].shape} != spec shape {shape}")
            nested[lid][pname] = arrays[key]
    return Model(spec, make_params(spec, nested))
