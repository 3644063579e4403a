"""Checkpoint store: JSON manifest plus a single binary tensor blob.

Layout of a checkpoint directory:

    manifest.json   — format version, config echo, step, seed, tensor index
    tensors.bin     — concatenated little-endian raw tensor data

Each index entry records name, dtype, shape, byte offset/length and a
sha256 checksum, so loads are verified tensor-by-tensor and a truncated or
corrupted blob fails with an integrity error instead of silently loading.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, IntegrityError
from .unet import UNet, UNetConfig, build_unet

FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(state: dict, path: Path, config: Optional[dict] = None,
                 meta: Optional[dict] = None) -> dict:
    """Write a name->tensor mapping; returns the manifest written."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    index = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ConfigError(f"unsupported tensor dtype {arr.dtype.name} for {name!r}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": len(blob),
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blob.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": index,
    }
    _atomic_write(path / "tensors.bin", bytes(blob))
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=2).encode("utf-8"))
    return manifest


def load_tensors(path: Path) -> tuple:
    """Read back (state dict of torch tensors, manifest), verifying checksums."""
    path = Path(path)
    manifest_file = path / "manifest.json"
    blob_file = path / "tensors.bin"
    if not manifest_file.exists() or not blob_file.exists():
        raise IntegrityError(f"checkpoint at {path} is missing manifest.json or tensors.bin")
    manifest = json.loads(manifest_file.read_text("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format {manifest.get('format_version')}")
    blob = blob_file.read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise IntegrityError(f"tensor {entry['name']!r} truncated in {blob_file}")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"checksum mismatch for tensor {entry['name']!r} in {blob_file}")
        dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(entry["dtype"], copy=True))
    return state, manifest


def save_unet(model: UNet, path: Path, step: int = 0, seed: int = 0,
              extra_meta: Optional[dict] = None) -> dict:
    meta = {"step": step, "seed": seed}
    meta.update(extra_meta or {})
    config = dataclasses.asdict(model.config)
    return save_tensors(dict(model.state_dict()), path, config=config, meta=meta)


def load_unet(path: Path, expect_in_channels: Optional[int] = None) -> tuple:
    """Rebuild a UNet from its checkpoint; returns (model, manifest)."""
    state, manifest = load_tensors(path)
    raw = dict(manifest["config"])
    for key in ("level_multipliers", "attention_levels"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cfg = UNetConfig(**raw)
    if expect_in_channels is not None and cfg.in_channels != expect_in_channels:
        raise ConfigError(
            f"checkpoint field in_channels={cfg.in_channels} incompatible with "
            f"requested in_channels={expect_in_channels}"
        )
    model = build_unet(cfg)
    model.load_state_dict(state)
    return model, manifest
