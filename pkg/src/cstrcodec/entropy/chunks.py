"""Self-delimiting byte chunks: [u32 LE payload length][u32 LE CRC32][payload].

Every entropy-coded unit in the bitstream is wrapped in a chunk so the decoder
can skip to the next unit without arithmetic decoding and can detect
corruption before attempting to decode.
"""

from __future__ import annotations

import struct
import zlib

_HEADER = struct.Struct("<II")


class CorruptStreamError(ValueError):
    """Raised when a chunk is truncated or its checksum does not match."""


def pack_chunk(payload: bytes) -> bytes:
    """Wrap a payload (possibly empty) in a length + CRC32 header."""
    return _HEADER.pack(len(payload), zlib.crc32(payload)) + payload


def unpack_chunk(buf: bytes, offset: int = 0) -> tuple[bytes, int]:
    """Read one chunk starting at ``offset``; return (payload, next_offset)."""
    end = offset + _HEADER.size
    if end > len(buf):
        raise CorruptStreamError("truncated chunk header")
    length, crc = _HEADER.unpack_from(buf, offset)
    payload_end = end + length
    if payload_end > len(buf):
        raise CorruptStreamError("truncated chunk payload")
    payload = bytes(buf[end:payload_end])
    if zlib.crc32(payload) != crc:
        raise CorruptStreamError("chunk checksum mismatch")
    return payload, payload_end
