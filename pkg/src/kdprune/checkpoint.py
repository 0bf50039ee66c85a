"""Binary tensor container used for checkpoints and corpus files.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"KDPCKPT\\x00"
    bytes 8..15    uint64 header length H
    bytes 16..16+H UTF-8 JSON header
    padding        zero bytes up to the next multiple of 8
    data section   raw little-endian blobs, each starting on an 8-byte boundary

The header is ``{"format_version": 1, "tensors": {name: {"dtype", "shape",
"offset", "nbytes"}}, "meta": {...}}`` where ``offset`` counts from the start
of the data section.  Keys are sorted, so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"KDPCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4", "uint8": "u1"}


class CheckpointError(ValueError):
    pass


def _pad8(n: int) -> int:
    return (-n) % 8


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        kind = arr.dtype.name
        if kind not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {kind} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[kind])).tobytes()
        entries[name] = {"dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw + b"\x00" * _pad8(len(raw)))
        offset += len(raw) + _pad8(len(raw))
    header = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta or {})}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(hbytes).to_bytes(8, "little"))
        fh.write(hbytes)
        fh.write(b"\x00" * _pad8(len(hbytes)))
        for blob in blobs:
            fh.write(blob)


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return _header(fh, path)[0]


def _header(fh, path):
    magic = fh.read(8)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    hlen = int.from_bytes(fh.read(8), "little")
    header = json.loads(fh.read(hlen).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, 16 + hlen + _pad8(hlen)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        header, start = _header(fh, path)
        fh.seek(0)
        buf = fh.read()
    tensors = {}
    for name, e in header["tensors"].items():
        lo = start + e["offset"]
        arr = np.frombuffer(buf, dtype=np.dtype(_DTYPES[e["dtype"]]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=lo)
        tensors[name] = arr.reshape(e["shape"]).astype(e["dtype"], copy=True)
    return tensors, header["meta"]
