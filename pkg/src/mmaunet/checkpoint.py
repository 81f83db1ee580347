"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MMAU"  u16 version
    u16 len  kind tag (utf-8)
    u32 len  descriptor (utf-8 ``key=value`` lines, sorted)
    u32      parameter count
    per parameter:
        u16 len  name (utf-8)
        u8       ndim, then ndim x u32 dims
        f32 x prod(dims) payload
    32 bytes SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DependencyError, FileError, ParseError

MAGIC = b"MMAU"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    descriptor: dict
    params: dict  # name -> float32 ndarray, insertion ordered


def encode(ckpt):
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    kind = ckpt.kind.encode()
    out += struct.pack("<H", len(kind)) + kind
    desc = "".join(f"{k}={ckpt.descriptor[k]}\n" for k in sorted(ckpt.descriptor)).encode()
    out += struct.pack("<I", len(desc)) + desc
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ParseError(
                f"truncated checkpoint reading {what}: need {n} bytes, "
                f"{len(self.buf) - self.pos} left",
                self.pos,
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf):
    if len(buf) < 32 + len(MAGIC) + 2:
        raise ParseError("file too short to be a checkpoint", 0)
    body, digest = buf[:-32], buf[-32:]
    r = _Reader(body)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic; not an MMAU checkpoint", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    if hashlib.sha256(body).digest() != digest:
        raise ParseError("checksum mismatch; checkpoint is corrupt", len(body))
    (n,) = r.unpack("<H", "kind length")
    kind = r.take(n, "kind").decode()
    (n,) = r.unpack("<I", "descriptor length")
    descriptor = {}
    for line in r.take(n, "descriptor").decode().splitlines():
        key, _, value = line.partition("=")
        descriptor[key] = value
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode()
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size, f"payload of {name}"), dtype="<f4")
        params[name] = arr.reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise ParseError("trailing bytes after parameters", r.pos)
    return Checkpoint(kind, descriptor, params)


def save(path, ckpt):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(ckpt))
    except OSError as exc:
        raise FileError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint {path} does not exist")
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FileError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return decode(buf)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def params_digest(named):
    """SHA-256 over names and float32 bytes of ``(name, array)`` pairs."""
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f4").tobytes())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
