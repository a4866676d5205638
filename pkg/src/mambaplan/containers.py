"""Tensor container files: a JSON manifest plus a raw little-endian f64 blob.

A container ``stem`` is the pair ``stem.json`` / ``stem.bin``. The manifest
lists named entries with byte offsets into the blob, and may carry an
arbitrary JSON-serializable ``meta`` dict. Writes are byte-deterministic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ContainerError(Exception):
    """Raised for malformed, truncated, or inconsistent container files."""


def write_container(stem, arrays, meta=None):
    """Write named float64 arrays to ``stem.json`` + ``stem.bin``.

    ``arrays`` is a dict name -> ndarray; insertion order fixes the layout.
    """
    stem = Path(stem)
    entries = []
    blob = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        entries.append(
            {
                "name": str(name),
                "dtype": "f64",
                "shape": [int(s) for s in arr.shape],
                "offset": len(blob),
                "nbytes": len(raw),
            }
        )
        blob.extend(raw)
    manifest = {"version": FORMAT_VERSION, "entries": entries}
    if meta is not None:
        manifest["meta"] = meta
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(bytes(blob))
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )


def read_container(stem):
    """Read a container back as (dict name -> ndarray, meta dict)."""
    stem = Path(stem)
    jpath = stem.with_suffix(".json")
    bpath = stem.with_suffix(".bin")
    if not jpath.exists() or not bpath.exists():
        raise ContainerError(f"container {stem} is missing its .json or .bin file")
    try:
        manifest = json.loads(jpath.read_text())
    except json.JSONDecodeError as e:
        raise ContainerError(f"bad manifest {jpath}: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise ContainerError(
            f"unsupported container version {manifest.get('version')!r} in {jpath}"
        )
    blob = bpath.read_bytes()
    arrays = {}
    for entry in manifest["entries"]:
        name = entry["name"]
        if entry["dtype"] != "f64":
            raise ContainerError(f"entry {name!r}: unsupported dtype {entry['dtype']!r}")
        off, nb = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 8 != nb:
            raise ContainerError(f"entry {name!r}: shape {shape} does not match nbytes {nb}")
        if off + nb > len(blob):
            raise ContainerError(
                f"entry {name!r}: blob truncated (need {off + nb} bytes, have {len(blob)})"
            )
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nb // 8, offset=off).reshape(shape).copy()
    return arrays, manifest.get("meta")
