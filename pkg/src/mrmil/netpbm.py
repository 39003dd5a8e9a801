"""Binary PPM (P6) / PGM (P5) read and write for 8-bit rasters."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import FormatError


def _header(magic: str, width: int, height: int) -> bytes:
    return f"{magic}\n{width} {height}\n255\n".encode("ascii")


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 raster, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    return _header("P6", w, h) + rgb.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"expected HxW raster, got shape {gray.shape}")
    h, w = gray.shape
    return _header("P5", w, h) + gray.tobytes()


def decode(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into an ``HxW`` or ``HxWx3`` uint8 array."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated netpbm header at byte {pos}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r} at byte 0")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"payload at byte {pos}: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(gray))


def read(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes()).copy()
