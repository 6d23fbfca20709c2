"""Self-describing checkpoint archive.

A checkpoint is an uncompressed zip holding ``manifest.json`` plus one raw
little-endian float32 blob per tensor under ``tensors/<name>.f32``. The
manifest lists every tensor with its shape. Entries are written in sorted
order with fixed timestamps, so saving a loaded archive reproduces it byte
for byte.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import VeloformError
from .io import atomic_write_bytes

FORMAT = "veloform-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(VeloformError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.create_system = 3
    info.external_attr = 0o644 << 16
    return info


def dumps(manifest: dict, tensors: dict[str, np.ndarray]) -> bytes:
    manifest = dict(manifest)
    manifest["format"] = FORMAT
    manifest["version"] = VERSION
    manifest["tensors"] = {
        name: {"shape": list(np.shape(arr)), "dtype": "<f4"} for name, arr in sorted(tensors.items())
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(tensors):
            blob = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
            zf.writestr(_entry(f"tensors/{name}.f32"), blob)
    return buf.getvalue()


def save(path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(manifest, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
        if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
            fmt = manifest.get("format") if isinstance(manifest, dict) else None
            raise CheckpointError(f"{path}: unexpected format {fmt!r}")
        tensors = {}
        for name, meta in manifest.get("tensors", {}).items():
            try:
                raw = zf.read(f"tensors/{name}.f32")
                arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
            except (KeyError, ValueError) as exc:
                raise CheckpointError(f"{path}: tensor {name!r} is missing or malformed ({exc})") from exc
            tensors[name] = arr
    return manifest, tensors
