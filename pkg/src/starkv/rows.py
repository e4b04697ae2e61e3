"""Row codec: records are opaque byte strings to storage, but procedures,
replication payloads and operation descriptors address them as a flat list of
byte-string fields. Encoding is a plain concatenation of u32-length-prefixed
fields."""

from __future__ import annotations

import struct

_LEN = struct.Struct("<I")


def encode_row(fields: list[bytes]) -> bytes:
    parts = []
    for f in fields:
        parts.append(_LEN.pack(len(f)))
        parts.append(f)
    return b"".join(parts)


def decode_row(data: bytes) -> list[bytes]:
    fields: list[bytes] = []
    off = 0
    n = len(data)
    while off < n:
        if off + 4 > n:
            raise ValueError(f"truncated field length at offset {off}")
        (flen,) = _LEN.unpack_from(data, off)
        off += 4
        if off + flen > n:
            raise ValueError(f"truncated field body at offset {off}")
        fields.append(data[off : off + flen])
        off += flen
    return fields


def pack_i64(v: int) -> bytes:
    return struct.pack("<q", v)


def unpack_i64(b: bytes) -> int:
    return struct.unpack("<q", b)[0]
