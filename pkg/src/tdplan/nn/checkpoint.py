"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"TDPCKPT\\x00"
    version    u32       FORMAT_VERSION
    meta_len   u32       length of the metadata blob
    meta       bytes     UTF-8 JSON, keys sorted, no whitespace
    n_entries  u32
    entry*     u16 name_len | name (UTF-8) | u8 ndim | u32 * ndim shape
               | float64 little-endian values, row-major

Entries are written in store order, so the same parameters and metadata
always produce the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from .params import ParamStore

MAGIC = b"TDPCKPT\x00"
FORMAT_VERSION = 1


def dumps(arrays, meta=None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; ascontiguousarray would promote 0-d
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes):
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError(f"truncated checkpoint while reading {what} at byte {pos}", field=what)
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8, "magic")) != MAGIC:
        raise ParseError("not a tdplan checkpoint (bad magic)", field="magic")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", field="version")
    try:
        meta = json.loads(bytes(take(meta_len, "meta")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad metadata: {exc}", field="meta") from None
    (n,) = struct.unpack("<I", take(4, "n_entries"))
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", take(2, "name_len"))
        name = bytes(take(ln, "name")).decode()
        (ndim,) = struct.unpack("<B", take(1, f"{name}.ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name}.shape"))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count, name), dtype="<f8").astype(np.float64)
        arrays[name] = data.reshape(shape)
    if pos != len(view):
        raise ParseError(f"{len(view) - pos} trailing bytes after last entry", field="trailer")
    return arrays, meta


def save_checkpoint(path, store_or_arrays, meta=None):
    arrays = store_or_arrays.state_dict() if isinstance(store_or_arrays, ParamStore) else store_or_arrays
    Path(path).write_bytes(dumps(arrays, meta))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
