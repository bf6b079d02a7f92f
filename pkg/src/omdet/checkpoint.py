"""OMCK checkpoint container.

Layout (little-endian)::

    b"OMCK" | u32 version=1 | u32 entry_count
    entry_count x ( u16 name_len | name UTF-8 | u8 dtype | u8 ndim | ndim x u32 dims | raw bytes )

dtype codes: 0 float32, 1 float64, 2 uint8, 3 int64. Metadata (config, step,
RNG state) is stored as a UTF-8 JSON blob in the uint8 entry ``__meta__``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from omdet.errors import DataError, FormatError

MAGIC = b"OMCK"
VERSION = 1
META = "__meta__"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write atomically (temp file + rename) so a crash never leaves half a checkpoint."""
    entries = dict(arrays)
    entries[META] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise DataError(f"checkpoint entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", _CODES[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=dt).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()

    def need(off: int, n: int, what: str) -> None:
        if off + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", off)

    need(0, 12, "header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (n,) = struct.unpack_from("<H", data, off)
        need(off + 2, n + 2, "name")
        name = data[off + 2 : off + 2 + n].decode("utf-8")
        off += 2 + n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if code not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}", off - 2)
        need(off, 4 * ndim, "shape")
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(off, nbytes, f"data of {name!r}")
        out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", off)
    if META not in out:
        raise FormatError("checkpoint has no metadata entry")
    meta = json.loads(out.pop(META).tobytes().decode("utf-8"))
    return out, meta
