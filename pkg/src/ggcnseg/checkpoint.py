"""Binary checkpoint format ("GSTN").

Layout, all integers little-endian::

    magic      4 bytes  b"GSTN"
    version    u16      (currently 1)
    header     u32 byte length + UTF-8 text, one ``key=value`` per line
    count      u32      number of tensors
    per tensor:
        name   u32 byte length + UTF-8
        rank   u8
        dims   rank x u32
        data   prod(dims) x f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"GSTN"
VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(tensors: dict[str, np.ndarray], header: dict[str, str] | None = None) -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION)]
    text = "".join(f"{k}={v}\n" for k, v in (header or {}).items())
    out.append(_pack_str(text))
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        if arr.ndim > 255:
            raise DataError(f"tensor {name!r} has too many dimensions")
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError("truncated checkpoint")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DataError("not a GSTN checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = {}
    for line in r.string().splitlines():
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(dims)
    if r.pos != len(buf):
        raise DataError("trailing bytes after checkpoint payload")
    return tensors, header


def save(path, tensors: dict[str, np.ndarray], header: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, header))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
