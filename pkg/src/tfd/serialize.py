"""Flat binary tensor files and named-tensor checkpoint directories.

File layout: a 16-byte header of four little-endian u32 dims, then the data
as row-major little-endian float64.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from tfd.tensor import Tensor

_HEADER = struct.Struct("<4I")
MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    pass


def _as_rank4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ValueError(f"tensor files hold at most 4 dims, got shape {shape}")
    return (1,) * (4 - len(shape)) + tuple(int(d) for d in shape)


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    dims = _as_rank4(arr.shape)
    return _HEADER.pack(*dims) + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated tensor file: missing header")
    dims = _HEADER.unpack_from(buf)
    count = int(np.prod(dims))
    payload = buf[_HEADER.size:]
    if len(payload) != 8 * count:
        raise ValueError(f"tensor payload has {len(payload)} bytes, header {dims} needs {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def save_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Read a tensor file; ``shape`` restores a lower-rank logical shape."""
    arr = tensor_from_bytes(Path(path).read_bytes())
    if shape is not None:
        if _as_rank4(tuple(shape)) != arr.shape:
            raise ValueError(f"{path}: stored dims {arr.shape} do not match expected {tuple(shape)}")
        arr = arr.reshape(shape)
    return arr


def save_checkpoint(directory, params: Mapping[str, Tensor], extra: dict | None = None) -> None:
    """Write one ``<name>.bin`` per parameter plus ``manifest.json`` (name -> shape)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}, **(extra or {})}
    for name, t in params.items():
        save_tensor(directory / f"{name}.bin", t)
        manifest["tensors"][name] = list(t.shape)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text())


def load_checkpoint(directory, expected: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Load every tensor in the manifest.

    With ``expected`` (name -> shape), missing names, extra names and any shape
    mismatch are rejected.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    shapes = {k: tuple(v) for k, v in manifest["tensors"].items()}
    if expected is not None:
        expected = {k: tuple(v) for k, v in expected.items()}
        missing = sorted(set(expected) - set(shapes))
        extra = sorted(set(shapes) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint names differ: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if shapes[name] != shape:
                raise CheckpointError(f"{name}: checkpoint shape {shapes[name]} != model shape {shape}")
    return {name: load_tensor(directory / f"{name}.bin", shape) for name, shape in shapes.items()}
