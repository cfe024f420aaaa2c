"""Domain-separated seed derivation."""

from __future__ import annotations

import hashlib
import struct


def derive_seed(master: int, *parts: int | str) -> int:
    """Hash ``master`` and a path of labels/indices into an independent u64 seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", master & 0xFFFFFFFFFFFFFFFF))
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode() + b"\0")
        else:
            h.update(b"i" + struct.pack("<q", part))
    return struct.unpack("<Q", h.digest())[0]
