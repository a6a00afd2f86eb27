"""Bundle container: a JSON manifest plus raw little-endian float buffers.

Datasets and checkpoints share this layout.  Dataset tensors are 32-bit
floats; checkpoints store 64-bit buffers so a reload continues training
bitwise-identically.  One file per tensor, named in the manifest; write
order follows the manifest so regeneration is byte-for-byte reproducible.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

MANIFEST_NAME = "manifest.json"

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _safe_name(name: str) -> str:
    return name.replace("/", "_").replace("..", "_")


def save_bundle(directory, manifest: dict, tensors: dict, dtype: str = "f4") -> Path:
    """Write tensors and manifest; returns the manifest path.

    ``manifest`` is copied and extended with the tensor index; values must
    be JSON-serializable.
    """
    if dtype not in _DTYPES:
        raise ConfigError(f"unsupported buffer dtype '{dtype}'")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for name, array in tensors.items():
        array = np.asarray(array)
        filename = _safe_name(name) + ".bin"
        array.astype(_DTYPES[dtype], copy=False).tofile(directory / filename)
        index.append({"name": name, "file": filename,
                      "shape": list(array.shape), "dtype": dtype})
    payload = dict(manifest)
    payload["tensors"] = index
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=False))
    return path


def load_bundle(directory):
    """Read a bundle back: ``(manifest, {name: float64 array})``."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no manifest found in {directory}")
    manifest = json.loads(path.read_text())
    tensors = {}
    for entry in manifest.get("tensors", []):
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ConfigError(f"manifest declares unknown dtype '{entry['dtype']}'")
        raw = np.fromfile(directory / entry["file"], dtype=dt)
        tensors[entry["name"]] = raw.reshape(entry["shape"]).astype(np.float64)
    return manifest, tensors
