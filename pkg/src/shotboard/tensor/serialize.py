"""Binary tensor files (``DSTN``).

Layout: magic ``b"DSTN"``, version byte, dtype byte (0=f32, 1=f64), rank
byte, ``rank`` little-endian uint32 dims, then the row-major little-endian
payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"DSTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def to_bytes(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a DSTN tensor file")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported DSTN version {version}")
    if code not in _DTYPES:
        raise CheckpointError(f"{source}: unknown dtype code {code}")
    off = 7 + 4 * rank
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
    if len(buf) - off != expected:
        raise CheckpointError(
            f"{source}: payload is {len(buf) - off} bytes, header says {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path, array) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(array))
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
