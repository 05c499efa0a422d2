"""Tensor-directory persistence: manifest.json plus one raw .bin per tensor.

Values are little-endian IEEE-754 doubles in row-major order ("f64le"), so a
saved run can be reloaded bit-exactly on any platform.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_NAME = "cdreg-tensors-v1"


class CheckpointError(IOError):
    pass


def _file_name(tensor_name: str) -> str:
    return tensor_name.replace("/", "_") + ".bin"


def save_tensors(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors plus a manifest describing names, shapes, and offsets."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fname = _file_name(name)
        data = arr.tobytes()
        (directory / fname).write_bytes(data)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f64le",
                "file": fname,
                "byte_offset": 0,
                "byte_length": len(data),
            }
        )
    manifest = {"format": FORMAT_NAME, "meta": meta or {}, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Read back a tensor directory; returns (tensors, meta).

    Raises CheckpointError on a missing manifest, missing tensor file,
    size mismatch, or non-finite values.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        path = directory / entry["file"]
        if not path.exists():
            raise CheckpointError(f"missing tensor file {path}")
        raw = path.read_bytes()
        start = entry["byte_offset"]
        end = start + entry["byte_length"]
        if len(raw) < end:
            raise CheckpointError(
                f"{path}: {len(raw)} bytes, manifest expects at least {end}"
            )
        arr = np.frombuffer(raw[start:end], dtype="<f8").reshape(entry["shape"]).copy()
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {entry['name']} has non-finite entries")
        tensors[entry["name"]] = arr
    return tensors, manifest.get("meta", {})
