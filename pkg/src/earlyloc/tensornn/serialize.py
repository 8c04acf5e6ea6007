"""Model file format: a JSON manifest plus a little-endian float32 blob.

The manifest carries ``magic`` ("QLOC"), ``format_version`` (1) and a
``blocks`` list of ``{name, shape, offset, nbytes}`` entries whose order is
the order of the blocks in the blob. Everything else in the manifest is owned
by the caller.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "QLOC"
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


class ModelFormatError(ValueError):
    """Raised for malformed or incompatible model files."""


def blob_path_for(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def write_model(manifest_path: str | Path, manifest: dict, blocks: list[tuple[str, np.ndarray]]) -> Path:
    """Write ``blocks`` to the blob and the manifest (with block table) to JSON."""
    manifest_path = Path(manifest_path)
    blob_path = blob_path_for(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in blocks:
            data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE)
            fh.write(data.tobytes())
            table.append({
                "name": name,
                "shape": list(data.shape),
                "offset": offset,
                "nbytes": data.nbytes,
            })
            offset += data.nbytes
    doc = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        **manifest,
        "blob": blob_path.name,
        "blob_nbytes": offset,
        "blocks": table,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    return manifest_path


def read_manifest(manifest_path: str | Path) -> dict:
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ModelFormatError(f"{manifest_path}: no such model file") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{manifest_path}: not a JSON manifest ({exc})") from exc
    if doc.get("magic") != MAGIC:
        raise ModelFormatError(f"{manifest_path}: bad magic {doc.get('magic')!r}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{manifest_path}: unsupported format version {doc.get('format_version')!r}"
        )
    return doc


def read_model(manifest_path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return the manifest and a name -> float32 array mapping."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    blob_path = manifest_path.parent / doc["blob"]
    try:
        raw = blob_path.read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"{blob_path}: weight blob missing") from None
    if len(raw) != doc["blob_nbytes"]:
        raise ModelFormatError(
            f"{blob_path}: expected {doc['blob_nbytes']} bytes, found {len(raw)}"
        )
    blocks = {}
    for entry in doc["blocks"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(raw, dtype=BLOB_DTYPE, count=nbytes // 4, offset=start)
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise ModelFormatError(f"block {entry['name']}: shape {shape} does not match {nbytes} bytes")
        blocks[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return doc, blocks
