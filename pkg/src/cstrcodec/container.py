"""Bitstream container: a fixed header followed by CRC-protected chunks.

Header layout (little-endian, 13 bytes):
    magic   4 bytes  b"CSTR"
    version u8       format version, currently 1
    width   u16      true frame width before padding
    height  u16      true frame height before padding
    gop     u8       frames per group (first of each group is intra)
    model   u8       model variant index
    lambda  u8       rate point index
    flags   u8       bit 0: distortion metric (0 PSNR, 1 MS-SSIM)

Every entropy payload after the header is one self-delimiting chunk
([u32 length][u32 crc32][payload]); an intra frame contributes 2 chunks and
an inter frame 4, so the frame count is implied by the stream length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"CSTR"
VERSION = 1
FLAG_MSSSIM = 1

_HEADER = struct.Struct("<4sBHHBBBB")
HEADER_SIZE = _HEADER.size


class ContainerError(ValueError):
    """Raised for unrecognized or malformed stream headers."""


@dataclass
class StreamHeader:
    width: int
    height: int
    gop_length: int
    model_id: int = 0
    lambda_index: int = 0
    flags: int = 0

    @property
    def metric(self) -> str:
        return "msssim" if self.flags & FLAG_MSSSIM else "psnr"

    def pack(self) -> bytes:
        if not (0 < self.width <= 0xFFFF and 0 < self.height <= 0xFFFF):
            raise ContainerError("frame dimensions out of range")
        if not 0 < self.gop_length <= 0xFF:
            raise ContainerError("gop length out of range")
        return _HEADER.pack(
            MAGIC,
            VERSION,
            self.width,
            self.height,
            self.gop_length,
            self.model_id,
            self.lambda_index,
            self.flags,
        )


def unpack_header(data: bytes) -> tuple[StreamHeader, int]:
    if len(data) < HEADER_SIZE:
        raise ContainerError("stream shorter than header")
    magic, version, width, height, gop, model_id, lam, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    header = StreamHeader(width, height, gop, model_id, lam, flags)
    return header, HEADER_SIZE
