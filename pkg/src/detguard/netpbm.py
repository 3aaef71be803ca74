"""Binary PPM (P6) and PGM (P5) reading and writing.

Arrays follow the package convention ``[x, y(, c)]``; files store rows of
constant ``y``, so arrays are transposed on the way in and out.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]


def _header(magic: str, width: int, height: int) -> bytes:
    return f"{magic}\n{width} {height}\n255\n".encode("ascii")


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    """Write a ``(W, H, 3)`` uint8 array."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected a (W, H, 3) uint8 array, got {image.dtype} {image.shape}")
    W, H = image.shape[:2]
    Path(path).write_bytes(_header("P6", W, H) + np.ascontiguousarray(image.transpose(1, 0, 2)).tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    """Write a ``(W, H)`` uint8 array."""
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValueError(f"expected a (W, H) uint8 array, got {gray.dtype} {gray.shape}")
    W, H = gray.shape
    Path(path).write_bytes(_header("P5", W, H) + np.ascontiguousarray(gray.T).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens (comments skipped) and the data offset."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(data[start:pos])
    return out, pos + 1


def _read(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tok, offset = _tokens(data, 4)
    if tok[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tok[0][:8]!r}")
    W, H, maxval = (int(t) for t in tok[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    n = W * H * channels
    body = data[offset:offset + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape((H, W, channels) if channels > 1 else (H, W))
    return np.ascontiguousarray(np.swapaxes(arr, 0, 1))


def read_ppm(path: PathLike) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path: PathLike) -> np.ndarray:
    return _read(path, b"P5", 1)


def to_float(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
