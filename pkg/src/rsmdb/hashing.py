"""Fixed 256-bit hash used for rows, leaves, digests and the log chain.

Every replica in a process must agree on the function, so it is chosen once
at import time. BLAKE3 is used when the ``blake3`` package is installed;
otherwise BLAKE2b with a 32-byte digest.
"""

from __future__ import annotations

import hashlib

try:  # pragma: no cover - depends on the environment
    from blake3 import blake3 as _blake3
except ImportError:  # pragma: no cover
    _blake3 = None

HASH_WIDTH = 32
ZERO_HASH = bytes(HASH_WIDTH)

if _blake3 is not None:  # pragma: no cover
    HASH_NAME = "blake3"

    def digest(data: bytes) -> bytes:
        return _blake3(data).digest()

else:
    HASH_NAME = "blake2b-256"

    def digest(data: bytes) -> bytes:
        return hashlib.blake2b(data, digest_size=HASH_WIDTH).digest()


def xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(HASH_WIDTH, "big")


def as_int(h: bytes) -> int:
    return int.from_bytes(h, "big")


def from_int(v: int) -> bytes:
    return v.to_bytes(HASH_WIDTH, "big")
