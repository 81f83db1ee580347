"""Binary Netpbm (P5 gray / P6 RGB, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, FileError, ParseError

_WHITESPACE = b" \t\n\r\v\f"


def _read_token(buf, pos):
    """Return ``(token, next_pos)`` skipping whitespace and ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c in (b"",) or c not in _WHITESPACE and c != b"#":
            break
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            pos += 1
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_netpbm(buf):
    """Decode P5/P6 bytes to a ``uint8`` array of shape ``(C, H, W)``."""
    if len(buf) < 2:
        raise ParseError("file too short for a Netpbm magic number", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, end = _read_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"{name} is not a decimal integer: {tok!r}", end - len(tok))
        value = int(tok)
        if value <= 0:
            raise ParseError(f"{name} must be positive", end - len(tok))
        fields.append(value)
        pos = end
    width, height, maxval = fields
    if maxval > 255:
        raise ParseError(f"maxval {maxval} needs 16-bit samples; only 8-bit is supported", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    expected = width * height * channels
    available = len(buf) - pos
    if available < expected:
        raise ParseError(
            f"truncated pixel data: expected {expected} bytes, missing {expected - available}",
            len(buf),
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    img = data.reshape(height, width, channels).transpose(2, 0, 1).copy()
    if maxval != 255:
        img = np.floor(img.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return img


def encode_netpbm(img):
    """Encode a ``uint8`` ``(C, H, W)`` array (C in {1, 3}) without comments."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise DimensionError(f"expected 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.transpose(1, 2, 0), dtype=np.uint8).tobytes()


def to_u8(values):
    """Quantize ``[0, 1]`` floats to 8-bit with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def load_image(path):
    """Load a P5/P6 file as float32 ``(C, H, W)`` in ``[0, 1]``."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    try:
        img = decode_netpbm(buf)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return img.astype(np.float32) / np.float32(255.0)


def save_image(path, values):
    """Save float ``(C, H, W)`` / ``(H, W)`` data in ``[0, 1]``; a leading batch
    axis of size 1 is dropped. Tensors are accepted."""
    arr = getattr(values, "data", values)
    arr = np.asarray(arr)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError("save_image takes a single image")
        arr = arr[0]
    return save_u8(path, to_u8(arr))


def save_u8(path, img):
    path = Path(path)
    try:
        path.write_bytes(encode_netpbm(img))
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc
    return path


def save_gray_u8(path, img):
    return save_u8(path, np.asarray(img, dtype=np.uint8)[None])
