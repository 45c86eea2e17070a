"""Shared framing for the little-endian binary artifacts (FCKP, FCDS, FCGN).

Layout: 4 magic bytes, u32 format version, body, u32 CRC32 of every byte that
precedes the checksum.
"""

import struct
import zlib
from pathlib import Path

from .errors import FormatError


def frame(magic: bytes, version: int, body: bytes) -> bytes:
    payload = magic + struct.pack("<I", version) + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def unframe(blob: bytes, magic: bytes, versions=(1,)) -> tuple[int, memoryview]:
    if len(blob) < 12:
        raise FormatError(f"file too short for a {magic.decode()} artifact ({len(blob)} bytes)")
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{magic.decode()} checksum mismatch")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version not in versions:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version, memoryview(blob)[8:-4]


class Reader:
    """Sequential struct reader over a body buffer."""

    def __init__(self, body):
        self.body = body
        self.pos = 0

    def unpack(self, fmt):
        try:
            values = struct.unpack_from(fmt, self.body, self.pos)
        except struct.error as exc:
            raise FormatError(f"truncated body: {exc}") from None
        self.pos += struct.calcsize(fmt)
        return values

    def take(self, n):
        if self.pos + n > len(self.body):
            raise FormatError("truncated body")
        out = bytes(self.body[self.pos:self.pos + n])
        self.pos += n
        return out

    def finish(self):
        if self.pos != len(self.body):
            raise FormatError(f"{len(self.body) - self.pos} trailing bytes in body")


def write_bytes(path, blob: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path
