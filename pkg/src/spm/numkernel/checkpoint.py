"""Binary tensor container ("SPMW") with a JSON sidecar for configuration.

Layout, all little-endian::

    b"SPMW"  u16 version  u32 n_entries
    n_entries x (u16 name_len, name utf-8, u8 dtype, u8 ndim, ndim x u32 extent)
    values of every entry, row-major, in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPMW"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    head = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    body = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(head + body)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an SPMW checkpoint")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        manifest.append((name, shape, _DTYPES[code]))
    out = {}
    for name, shape, dtype in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        nbytes = n * dtype.itemsize
        if off + nbytes > len(blob):
            raise CheckpointError("checkpoint truncated")
        out[name] = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(dumps(tensors))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    tensors = loads(path.read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return tensors, meta
