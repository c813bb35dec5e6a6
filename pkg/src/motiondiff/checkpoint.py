"""Checkpoint directories: ``manifest.json`` plus one raw float32 blob per tensor.

Blobs are little-endian float32 in C order; shapes live in the manifest.
The same layout stores motion-code datasets (one L x N blob per sequence).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, VideoIOError

FORMAT_VERSION = 1


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_state(directory, kind: str, state: dict, hparams: dict, config=None, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fname = _blob_name(name)
        arr.tofile(directory / fname)
        tensors[name] = {"shape": list(arr.shape), "file": fname}
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "hparams": hparams,
        "config": config,
        "config_hash": config_hash(config) if config is not None else None,
        "extra": extra or {},
        "dtype": "float32",
        "byteorder": "little",
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_state(directory, kind: str | None = None) -> tuple[dict, dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise VideoIOError(f"{directory}: no checkpoint manifest")
    manifest = json.loads(path.read_text())
    if kind is not None and manifest.get("kind") != kind:
        raise ConfigurationError(f"{directory}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    state = {}
    for name, info in manifest["tensors"].items():
        arr = np.fromfile(directory / info["file"], dtype="<f4")
        expected = int(np.prod(info["shape"])) if info["shape"] else 1
        if arr.size != expected:
            raise VideoIOError(f"{directory}: tensor {name} has {arr.size} values, expected {expected}")
        state[name] = torch.from_numpy(arr.reshape(info["shape"]).astype(np.float32))
    return manifest, state


def save_module(directory, kind: str, module: torch.nn.Module, hparams: dict, config=None, extra=None):
    return save_state(directory, kind, module.state_dict(), hparams, config, extra)


def save_code_dataset(directory, sequences: np.ndarray, extra=None) -> Path:
    """Write (n, L, N) motion-code sequences as one blob per sequence."""
    sequences = np.asarray(sequences, dtype=np.float32)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, seq in enumerate(sequences):
        fname = f"seq_{i:05d}.f32"
        np.ascontiguousarray(seq, dtype="<f4").tofile(directory / fname)
        files.append(fname)
    n, L, N = sequences.shape
    manifest = {"format_version": FORMAT_VERSION, "kind": "codes", "count": n, "L": L, "N": N,
                "dtype": "float32", "byteorder": "little", "files": files, "extra": extra or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_code_dataset(directory) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise VideoIOError(f"{directory}: no code-dataset manifest")
    manifest = json.loads(path.read_text())
    L, N = manifest["L"], manifest["N"]
    out = np.empty((manifest["count"], L, N), dtype=np.float32)
    for i, fname in enumerate(manifest["files"]):
        arr = np.fromfile(directory / fname, dtype="<f4")
        if arr.size != L * N:
            raise VideoIOError(f"{directory}: sequence {i} has {arr.size} values, expected {L * N}")
        out[i] = arr.reshape(L, N)
    return out, manifest
