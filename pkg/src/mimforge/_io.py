"""Little-endian binary helpers and atomic file writes."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file does not match its declared format."""


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def pack_u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(buf)})")
    return buf


def read_u32(fh: BinaryIO, count: int = 1) -> tuple[int, ...]:
    return struct.unpack(f"<{count}I", read_exact(fh, 4 * count))


def read_f64(fh: BinaryIO, count: int) -> np.ndarray:
    return np.frombuffer(read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)


def check_magic(fh: BinaryIO, magic: bytes) -> None:
    got = read_exact(fh, len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")


def pack_tensor(arr: np.ndarray) -> bytes:
    """Encode as (u32 rank, u32 dims..., f64 data)."""
    arr = np.asarray(arr, dtype=np.float64)
    return pack_u32(arr.ndim, *arr.shape) + arr.astype("<f8").tobytes()


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = read_u32(fh)
    dims = read_u32(fh, rank) if rank else ()
    n = int(np.prod(dims)) if dims else 1
    return read_f64(fh, n).reshape(dims)
