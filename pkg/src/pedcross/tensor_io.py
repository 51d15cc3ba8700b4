"""Binary tensor files (".pipt").

Layout, all little-endian: magic b"PIPT", u16 version=1, u8 dtype code
(0 = float32, 1 = float64), u8 ndim, then ndim u64 extents, then the
row-major payload. Used for maps, flows, and checkpoint parameter blobs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IoError

MAGIC = b"PIPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        if arr.dtype.kind in "fiub":
            arr = arr.astype(np.float32)
        else:
            raise IoError(f"unsupported dtype {arr.dtype}")
    code = _CODES[np.dtype(arr.dtype)]
    head = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(_DTYPES[code], copy=False).tobytes(order="C")


def tensor_from_bytes(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at offset; returns (array, next_offset)."""
    if blob[offset:offset + 4] != MAGIC:
        raise IoError("bad magic, not a .pipt tensor")
    version, code, ndim = struct.unpack_from("<HBB", blob, offset + 4)
    if version != VERSION:
        raise IoError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise IoError(f"unsupported dtype code {code}")
    pos = offset + 8
    shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(blob) < pos + nbytes:
        raise IoError("truncated .pipt payload")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), pos + nbytes


def write_pipt(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_pipt(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise IoError(f"no such tensor file: {p}")
    arr, _ = tensor_from_bytes(p.read_bytes())
    return arr
