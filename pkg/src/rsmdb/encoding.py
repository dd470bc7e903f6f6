"""Deterministic, injective binary encoding for small structured values.

Used for signed regions, result payloads and log dumps. Supported types are
None, bool, int, bytes, str, list/tuple (both decode as tuple) and dict
(entries are ordered by their encoded key, so insertion order never leaks
into the bytes).
"""

from __future__ import annotations

import struct
from typing import Any

_LEN = struct.Struct(">I")


def _lp(data: bytes) -> bytes:
    return _LEN.pack(len(data)) + data


def encode(value: Any) -> bytes:
    out: list[bytes] = []
    _encode_into(value, out)
    return b"".join(out)


def _encode_into(value: Any, out: list[bytes]) -> None:
    if value is None:
        out.append(b"N")
    elif value is True:
        out.append(b"T")
    elif value is False:
        out.append(b"F")
    elif isinstance(value, int):
        out.append(b"i" + _lp(str(value).encode()))
    elif isinstance(value, (bytes, bytearray, memoryview)):
        out.append(b"b" + _lp(bytes(value)))
    elif isinstance(value, str):
        out.append(b"s" + _lp(value.encode("utf-8")))
    elif isinstance(value, (list, tuple)):
        out.append(b"l" + _LEN.pack(len(value)))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        pairs = sorted((encode(k), encode(v)) for k, v in value.items())
        out.append(b"d" + _LEN.pack(len(pairs)))
        for k, v in pairs:
            out.append(k)
            out.append(v)
    else:
        raise TypeError(f"cannot canonically encode {type(value).__name__}")


def decode(data: bytes) -> Any:
    value, pos = _decode_at(memoryview(data), 0)
    if pos != len(data):
        raise ValueError("trailing bytes after encoded value")
    return value


def _decode_at(buf: memoryview, pos: int) -> tuple[Any, int]:
    tag = bytes(buf[pos : pos + 1])
    pos += 1
    if tag == b"N":
        return None, pos
    if tag == b"T":
        return True, pos
    if tag == b"F":
        return False, pos
    if tag in (b"i", b"b", b"s"):
        (n,) = _LEN.unpack_from(buf, pos)
        pos += 4
        raw = bytes(buf[pos : pos + n])
        if len(raw) != n:
            raise ValueError("truncated encoding")
        pos += n
        if tag == b"i":
            return int(raw.decode()), pos
        if tag == b"b":
            return raw, pos
        return raw.decode("utf-8"), pos
    if tag == b"l":
        (n,) = _LEN.unpack_from(buf, pos)
        pos += 4
        items = []
        for _ in range(n):
            item, pos = _decode_at(buf, pos)
            items.append(item)
        return tuple(items), pos
    if tag == b"d":
        (n,) = _LEN.unpack_from(buf, pos)
        pos += 4
        result = {}
        for _ in range(n):
            k, pos = _decode_at(buf, pos)
            v, pos = _decode_at(buf, pos)
            result[k] = v
        return result, pos
    raise ValueError(f"unknown tag {tag!r} at offset {pos - 1}")
