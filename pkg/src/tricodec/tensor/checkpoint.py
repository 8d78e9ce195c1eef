"""Single-file checkpoint container.

Layout (all integers little-endian, documented byte-for-byte in
docs/checkpoint.md):

    bytes 0..7    magic b"TCKPT001"
    bytes 8..15   uint64 manifest length in bytes
    bytes 16..    manifest, UTF-8 JSON
    padding       zero bytes to the next 16-byte boundary
    data section  raw array buffers, each at the offset its manifest
                  entry records (relative to the data section start,
                  16-byte aligned)

The manifest is {"version": 1, "meta": {...}, "arrays": [{"name", "dtype",
"shape", "offset", "nbytes"}, ...]} with arrays sorted by name and dtype
spelled as a little-endian numpy string ("<f8", "<i8", ...).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import MissingArtifactError

MAGIC = b"TCKPT001"
_ALIGN = 16
_DTYPES = {"<f8", "<f4", "<i8", "<i4", "|u1"}


def _aligned(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def save(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    buffers = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8")
        elif arr.dtype == np.float32:
            arr = arr.astype("<f4")
        elif arr.dtype == np.int64:
            arr = arr.astype("<i8")
        elif arr.dtype == np.int32:
            arr = arr.astype("<i4")
        elif arr.dtype == np.uint8:
            arr = arr.astype("|u1")
        else:
            raise TypeError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        buffers.append(arr.tobytes())
        offset = _aligned(offset + arr.nbytes)

    manifest = json.dumps(
        {"version": 1, "meta": meta or {}, "arrays": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        header = len(MAGIC) + 8 + len(manifest)
        f.write(b"\0" * (_aligned(header) - header))
        pos = 0
        for entry, buf in zip(entries, buffers):
            f.write(b"\0" * (entry["offset"] - pos))
            f.write(buf)
            pos = entry["offset"] + len(buf)


def load(path):
    """Returns (arrays dict, meta dict)."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container (bad magic)")
    mlen = int.from_bytes(blob[8:16], "little")
    manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    if manifest.get("version") != 1:
        raise ValueError(f"{path}: unsupported container version {manifest.get('version')}")
    data_start = _aligned(16 + mlen)
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ValueError(f"{path}: unsupported dtype {dtype} for {entry['name']!r}")
        start = data_start + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return arrays, manifest.get("meta", {})
