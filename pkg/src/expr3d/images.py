"""Grayscale raster helpers: binary PGM files and bilinear resampling.

Rasters are float64 arrays in [0, 1].  Disk round-trips go through 8-bit PGM,
so values quantize to k/255.  All resampling uses the half-pixel-center
convention: output pixel (i, j) samples the source at
((j + 0.5) * sx - 0.5, (i + 0.5) * sy - 0.5) with coordinates clamped to the
source pixel grid, which makes a scale factor of exactly 1.0 the identity.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import ContractError, FormatError, ValidationError


def save_pgm(path: str, image: np.ndarray) -> None:
    from .util import atomic_write_bytes

    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise ContractError(f"image must be a non-empty 2-d array, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes())


def load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    # Header: magic, width, height, maxval as ASCII tokens, then one whitespace
    # byte, then raw samples.  Comment lines start with '#'.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        match = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", blob[pos:])
        if not match:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(int(match.group(1)))
        pos += match.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after maxval
    need = width * height
    raw = np.frombuffer(blob, dtype=np.uint8, count=-1, offset=pos)
    if raw.size != need:
        raise FormatError(f"{path}: expected {need} samples, found {raw.size}")
    return raw.reshape(height, width).astype(float) / 255.0


def resample_region(image: np.ndarray, x0: float, y0: float, width: float, height: float,
                    out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly sample the axis-aligned region [x0, x0+width) x [y0, y0+height)
    of the source image onto an out_h x out_w grid."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ContractError(f"image must be 2-d, got shape {image.shape}")
    if width <= 0 or height <= 0 or out_h <= 0 or out_w <= 0:
        raise ContractError("region and output sizes must be positive")
    src_h, src_w = image.shape
    xs = x0 + (np.arange(out_w) + 0.5) * (width / out_w) - 0.5
    ys = y0 + (np.arange(out_h) + 0.5) * (height / out_h) - 0.5
    xs = np.clip(xs, 0.0, src_w - 1.0)
    ys = np.clip(ys, 0.0, src_h - 1.0)
    x_lo = np.floor(xs).astype(int)
    y_lo = np.floor(ys).astype(int)
    x_hi = np.minimum(x_lo + 1, src_w - 1)
    y_hi = np.minimum(y_lo + 1, src_h - 1)
    fx = xs - x_lo
    fy = ys - y_lo
    top = image[y_lo[:, None], x_lo[None, :]] * (1 - fx)[None, :] + image[y_lo[:, None], x_hi[None, :]] * fx[None, :]
    bot = image[y_hi[:, None], x_lo[None, :]] * (1 - fx)[None, :] + image[y_hi[:, None], x_hi[None, :]] * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ContractError(f"image must be 2-d, got shape {image.shape}")
    if (out_h, out_w) == image.shape:
        return image.copy()
    return resample_region(image, 0.0, 0.0, image.shape[1], image.shape[0], out_h, out_w)
