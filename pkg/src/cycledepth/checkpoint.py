"""Parameter checkpoints: ``<path>`` holds a flat little-endian float32 blob,
``<path>.json`` lists every parameter's name, shape and byte offset into it.
"""
import json
import os
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

FORMAT = "cycledepth-ckpt-v1"


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT, "dtype": "float32", "byteorder": "little",
                "nbytes": offset, "params": entries, "meta": meta or {}}
    tmp_blob = path.with_name(path.name + ".tmp")
    tmp_blob.write_bytes(b"".join(chunks))
    os.replace(tmp_blob, path)
    manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(arrays_by_name, meta)``."""
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = path.read_bytes()
    if len(blob) != manifest["nbytes"]:
        raise ValueError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['nbytes']}")
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return arrays, manifest.get("meta", {})
