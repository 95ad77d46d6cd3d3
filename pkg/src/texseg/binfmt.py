"""Little-endian binary containers sharing the ``TXSG`` magic.

Version 1 is the patch cache, 2 the feature matrix, 3 model checkpoints.
"""

import struct

import numpy as np

from .errors import BadMagic, TruncatedFile, VersionUnsupported

MAGIC = b"TXSG"
PATCH_VERSION = 1
FEATURE_VERSION = 2
CHECKPOINT_VERSION = 3


class Reader:
    """Cursor over a byte buffer that raises TruncatedFile on short reads."""

    def __init__(self, data: bytes, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"{self.path or 'buffer'}: wanted {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def u32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").copy()

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def header(version: int) -> bytes:
    return MAGIC + struct.pack("<H", version)


def open_reader(path, version: int) -> Reader:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, path)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {data[:4]!r}")
    r.pos = 4
    (got,) = r.unpack("H")
    if got != version:
        raise VersionUnsupported(f"{path}: format version {got}, expected {version}")
    return r
