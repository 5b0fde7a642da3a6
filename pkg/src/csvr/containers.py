"""Named-array container used for episodes, checkpoints and clip dumps.

Files are safetensors: a JSON header followed by raw little-endian buffers.
String metadata rides in the header's ``__metadata__`` block; we store one
JSON document under the ``meta`` key so nested values survive.
"""

import json
from pathlib import Path

import numpy as np
from safetensors import SafetensorError
from safetensors.numpy import load_file, save_file

from .exceptions import CheckpointFormatError


def save_arrays(path, arrays: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = {name: np.ascontiguousarray(value) for name, value in arrays.items()}
    header = {"meta": json.dumps(metadata or {}, sort_keys=True)}
    tmp = path.with_name(path.name + ".tmp")
    try:
        save_file(clean, str(tmp), metadata=header)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def load_arrays(path) -> tuple[dict, dict]:
    """Return ``(arrays, metadata)``; malformed files raise CheckpointFormatError."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such container: {path}")
    try:
        arrays = load_file(str(path))
        with open(path, "rb") as fh:
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size))
        meta = json.loads(header.get("__metadata__", {}).get("meta", "{}"))
    except (SafetensorError, ValueError, OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: not a valid array container ({exc})") from exc
    return arrays, meta
