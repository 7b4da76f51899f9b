"""ECKP checkpoint container.

Layout (all integers little-endian)::

    b"ECKP" | u32 version | u32 header_len | header JSON (utf-8)
    u32 n_tensors
    repeated: u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 shape | raw data

dtype codes: 0 float32, 1 uint8, 2 int64. Model tensors are float32; the
codes for uint8/int64 carry RNG state and ring-buffer counters exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ECKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<i8"): 2}


def _as_storable(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype.kind in "iub":
        return arr.astype("<i8")
    raise FormatError(f"cannot store dtype {arr.dtype}")


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _as_storable(tensors[name])
        raw = name.encode()
        parts.append(struct.pack("<HBB", len(raw), _CODES[arr.dtype], arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an ECKP checkpoint")
    try:
        version, head_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
        off = 12
        header = json.loads(data[off:off + head_len].decode())
        off += head_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            name_len, code, ndim = struct.unpack_from("<HBB", data, off)
            off += 4
            name = data[off:off + name_len].decode()
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dtype = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(shape).copy()
            off += n * dtype.itemsize
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return header, tensors
