"""Binary PGM (P5) reading and writing.

Depth maps use the KITTI 16-bit convention: ``value = round(depth_m * 256)``,
0 = invalid, saturating at 65535. Samples wider than 8 bits are big-endian as
the format requires.
"""

from __future__ import annotations

import os

import numpy as np

from .core import DepthMap

DEPTH_SCALE = 256.0


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if img.dtype == np.uint8:
        maxval, raw = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, raw = 65535, img.astype(">u2").tobytes()
    else:
        raise TypeError(f"PGM needs uint8 or uint16 data, got {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raw)


def _tokens(data: bytes):
    """Yield header tokens and the offset just past the last one, skipping comments."""
    pos = 0
    out = []
    while len(out) < 4:
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
            raise ValueError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), offset = _tokens(data)
    if magic != b"P5":
        raise ValueError(f"{os.fspath(path)}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = w * h * dtype.itemsize
    body = data[offset:offset + n]
    if len(body) != n:
        raise ValueError(f"{os.fspath(path)}: truncated PGM data")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.uint16 if dtype.itemsize == 2 else np.uint8)


def encode_depth(depth) -> np.ndarray:
    d = depth.data if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    d = np.where(np.isfinite(d) & (d > 0), d, 0.0)
    return np.clip(np.round(d * DEPTH_SCALE), 0, 65535).astype(np.uint16)


def write_depth(path, depth) -> None:
    write_pgm(path, encode_depth(depth))


def read_depth(path, max_depth: float = 65535 / DEPTH_SCALE) -> DepthMap:
    return DepthMap(read_pgm(path).astype(np.float64) / DEPTH_SCALE, max_depth=max_depth)


def write_labels(path, labels) -> None:
    lab = np.asarray(labels)
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("label ids must fit in 8 bits")
    write_pgm(path, lab.astype(np.uint8))


def read_labels(path) -> np.ndarray:
    return read_pgm(path).astype(np.int64)


def encode_unit(x) -> np.ndarray:
    """Map values in [0, 1] (e.g. a blend weight) onto the full 16-bit range.

    Non-finite values are written as 0.
    """
    v = np.round(np.asarray(x, dtype=np.float64) * 65535.0)
    return np.clip(np.where(np.isfinite(v), v, 0), 0, 65535).astype(np.uint16)


def encode_signed(x, scale: float) -> np.ndarray:
    """Offset encoding ``clamp(round(x*scale) + 32768, 0, 65535)`` for signed maps.

    NaN is written as 0, the same code as the most negative value; infinities clamp.
    """
    v = np.round(np.asarray(x, dtype=np.float64) * scale) + 32768
    return np.clip(np.nan_to_num(v, nan=0.0), 0, 65535).astype(np.uint16)


def decode_signed(img, scale: float) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) - 32768.0) / scale
