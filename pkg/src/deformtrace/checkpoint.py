"""Binary checkpoint I/O.

Layout: magic ``DTCK``, u32 version, then one record per tensor in sorted
name order. Record: u32 name length, name bytes (utf-8), u32 rank, u32 dims,
row-major float64 payload. All integers and floats are little-endian. Records
run to end of file; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTCK"
VERSION = 1


def save_checkpoint(params: dict[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in sorted(params):
            # asarray, not ascontiguousarray: the latter silently promotes
            # rank-0 tensors to shape (1,); tobytes() below copies anyway
            arr = np.asarray(params[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    offset = 8
    total = len(blob)
    while offset < total:
        offset, name_len = _read_u32(blob, offset, path)
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        offset, rank = _read_u32(blob, offset, path)
        dims = []
        for _ in range(rank):
            offset, d = _read_u32(blob, offset, path)
            dims.append(d)
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 8
        if offset + nbytes > total:
            raise ValueError(f"{path}: truncated payload for tensor '{name}'")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name] = arr.reshape(dims).astype(np.float64)
        offset += nbytes
    return params


def _read_u32(blob: bytes, offset: int, path: Path) -> tuple[int, int]:
    if offset + 4 > len(blob):
        raise ValueError(f"{path}: truncated checkpoint")
    (value,) = struct.unpack_from("<I", blob, offset)
    return offset + 4, value
