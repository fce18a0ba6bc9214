"""Readers and writers for PFM depth, binary PPM colour and binary PGM label images."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    """First ``n`` whitespace-separated header tokens and the payload offset."""
    pos = 0
    out = []
    for _ in range(n):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError("malformed header")
        out.append(m.group(2))
        pos = m.end()
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ImageFormatError("header not terminated by a single whitespace byte")
    return out, pos + 1


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# PFM


def encode_pfm(depth: np.ndarray) -> bytes:
    """Greyscale little-endian PFM; rows stored bottom to top."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ImageFormatError(f"PFM writer expects a 2-d map, got shape {depth.shape}")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(depth[::-1], dtype="<f4").tobytes()


def decode_pfm(buf: bytes) -> np.ndarray:
    (magic, w, h, scale), off = _header_tokens(buf, 4)
    if magic == b"PF":
        raise ImageFormatError("colour PFM is not supported; expected 'Pf'")
    if magic != b"Pf":
        raise ImageFormatError(f"bad PFM magic {magic!r}")
    try:
        w, h, scale = int(w), int(h), float(scale)
    except ValueError as e:
        raise ImageFormatError("malformed PFM header") from e
    if w < 1 or h < 1 or scale == 0:
        raise ImageFormatError("malformed PFM header")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(buf) - off < need:
        raise ImageFormatError(f"truncated PFM payload: need {need} bytes, have {len(buf) - off}")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return data[::-1].astype(np.float32)


def write_pfm(path, depth: np.ndarray) -> None:
    _atomic_write(path, encode_pfm(depth))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PPM / PGM


def _check_u8(img: np.ndarray, maxval: int) -> np.ndarray:
    img = np.asarray(img)
    if not np.issubdtype(img.dtype, np.integer):
        raise ImageFormatError("pixel values must be integers")
    if img.size and (img.min() < 0 or img.max() > maxval):
        raise ImageFormatError(f"pixel values outside [0, {maxval}]")
    return img.astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Binary P6, maxval 255; ``rgb`` is [H, W, 3] integers."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageFormatError(f"PPM writer expects [H, W, 3], got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _check_u8(rgb, 255).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), off = _header_tokens(buf, 4)
    if magic != b"P6":
        raise ImageFormatError(f"bad PPM magic {magic!r}")
    w, h, maxval = _ints(w, h, maxval)
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    if len(buf) - off < need:
        raise ImageFormatError("truncated PPM payload")
    return np.frombuffer(buf, np.uint8, need, off).reshape(h, w, 3).copy()


def encode_pgm(labels: np.ndarray, num_labels: int) -> bytes:
    """Binary P5 with maxval ``num_labels - 1``."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ImageFormatError(f"PGM writer expects a 2-d grid, got {labels.shape}")
    maxval = num_labels - 1
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"label count {num_labels} does not fit an 8-bit PGM")
    h, w = labels.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + _check_u8(labels, maxval).tobytes()


def decode_pgm(buf: bytes) -> tuple[np.ndarray, int]:
    """Returns (labels, maxval)."""
    (magic, w, h, maxval), off = _header_tokens(buf, 4)
    if magic != b"P5":
        raise ImageFormatError(f"bad PGM magic {magic!r}")
    w, h, maxval = _ints(w, h, maxval)
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}")
    if len(buf) - off < w * h:
        raise ImageFormatError("truncated PGM payload")
    img = np.frombuffer(buf, np.uint8, w * h, off).reshape(h, w).copy()
    if img.max(initial=0) > maxval:
        raise ImageFormatError("PGM value exceeds maxval")
    return img, maxval


def _ints(*toks: bytes) -> list[int]:
    try:
        vals = [int(t) for t in toks]
    except ValueError as e:
        raise ImageFormatError("malformed header") from e
    if min(vals) < 1:
        raise ImageFormatError("malformed header")
    return vals


def write_ppm(path, rgb: np.ndarray) -> None:
    _atomic_write(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path, labels: np.ndarray, num_labels: int) -> None:
    _atomic_write(path, encode_pgm(labels, num_labels))


def read_pgm(path) -> tuple[np.ndarray, int]:
    return decode_pgm(Path(path).read_bytes())


def to_u8(x: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Affine [lo, hi] -> [0, 255], rounded and clipped."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) - lo) * (255.0 / (hi - lo))), 0, 255).astype(np.uint8)
