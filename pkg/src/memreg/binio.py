"""Little-endian binary helpers shared by the checkpoint and dataset containers."""

from __future__ import annotations

import struct
import zlib

import numpy as np

from memreg.errors import FormatError, IncompatibleVersionError

# dtype codes used in array records
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
DTYPE_CODES = {dt: code for code, dt in DTYPES.items()}


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes):
        self._parts.append(bytes(b))

    def pack(self, fmt: str, *values):
        self._parts.append(struct.pack("<" + fmt, *values))

    def text(self, s: str, width: str = "I"):
        b = s.encode("utf-8")
        self.pack(width, len(b))
        self.raw(b)

    def array(self, arr: np.ndarray):
        code = DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise TypeError(f"unsupported array dtype {arr.dtype}")
        self.pack("BB", code, arr.ndim)
        if arr.ndim:
            self.pack(f"{arr.ndim}I", *arr.shape)
        self.raw(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())

    def finish(self, checksum: bool = True) -> bytes:
        body = b"".join(self._parts)
        if checksum:
            body += struct.pack("<I", zlib.crc32(body))
        return body


class Reader:
    """Cursor over a byte buffer; every failure reports the byte offset."""

    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0
        self.end = len(buf)

    def verify_checksum(self):
        """Check the trailing CRC-32 and exclude it from the readable range."""
        if self.end - self.pos < 4:
            raise FormatError("file too short for checksum", self.pos)
        self.end -= 4
        (stored,) = struct.unpack_from("<I", self.buf, self.end)
        if zlib.crc32(self.buf[: self.end]) != stored:
            raise FormatError("checksum mismatch, file is corrupt or truncated", self.end)

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"unexpected end of data reading {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def text(self, width: str = "I") -> str:
        (n,) = self.unpack(width)
        at = self.pos
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid UTF-8 text", at) from exc

    def array(self) -> np.ndarray:
        at = self.pos
        code, ndim = self.unpack("BB")
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code}", at)
        shape = self.unpack(f"{ndim}I") if ndim else ()
        dt = DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        data = self.take(count * dt.itemsize)
        return np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="), copy=True)

    def expect_magic(self, magic: bytes, what: str):
        if bytes(self.take(len(magic))) != magic:
            raise FormatError(f"not a {what} (bad magic)", 0)

    def expect_version(self, supported: int, what: str) -> int:
        at = self.pos
        (version,) = self.unpack("I")
        if version != supported:
            raise IncompatibleVersionError(
                f"{what} format version {version} is not supported (expected {supported})", at)
        return version

    def done(self):
        if self.pos != self.end:
            raise FormatError(f"{self.end - self.pos} trailing bytes", self.pos)
