"""Image files: 8-bit PNG and the raw float RFI format.

RFI layout: the 4-byte magic ``RFI1``, then width, height and channel count
as little-endian u32, then row-major little-endian float32 samples.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RFI_MAGIC = b"RFI1"
GAMMA = 2.2


class ImageFormatError(ValueError):
    pass


def _as_hwc(image):
    a = np.asarray(image)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ImageFormatError(f"image must be 2D or 3D, got shape {a.shape}")
    return a


def write_rfi(path, image) -> Path:
    a = _as_hwc(image)
    h, w, c = a.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(RFI_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def read_rfi(path) -> np.ndarray:
    """(H, W, C) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RFI_MAGIC:
        raise ImageFormatError(f"{path}: not an RFI file")
    w, h, c = struct.unpack("<III", data[4:16])
    n = w * h * c
    if len(data) != 16 + 4 * n:
        raise ImageFormatError(f"{path}: expected {n} floats, file holds {(len(data) - 16) // 4}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)


def encode_srgb(x):
    return np.clip(x, 0.0, 1.0) ** (1.0 / GAMMA)


def decode_srgb(x):
    return np.clip(x, 0.0, 1.0) ** GAMMA


def to_straight(rgb, alpha):
    """Divide premultiplied color by coverage where coverage is positive."""
    a = alpha[..., None]
    return np.where(a > 0, rgb / np.where(a > 0, a, 1.0), 0.0)


def write_png(path, rgb, alpha=None) -> Path:
    """8-bit RGBA PNG from straight-alpha linear rgb in [0, 1].

    A 2D ``rgb`` is written as gray. uint8 input is written unchanged.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    if rgb.dtype == np.uint8:
        out = rgb
        a8 = np.full(rgb.shape[:2], 255, np.uint8) if alpha is None else np.asarray(alpha, np.uint8)
    else:
        out = np.rint(encode_srgb(rgb.astype(np.float64)) * 255).astype(np.uint8)
        a = np.ones(rgb.shape[:2]) if alpha is None else np.asarray(alpha, dtype=np.float64)
        a8 = np.rint(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    rgba = np.concatenate([out[..., :3], a8[..., None]], axis=2)
    path = Path(path)
    Image.fromarray(rgba, "RGBA").save(path)
    return path


def read_png(path) -> np.ndarray:
    """(H, W, 4) float64 RGBA with linear, premultiplied rgb."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    rgb = decode_srgb(a[..., :3]) * a[..., 3:4]
    return np.concatenate([rgb, a[..., 3:4]], axis=2)


def read_image(path) -> np.ndarray:
    """RGBA target image from .rfi or .png as float64 (H, W, 4)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    if p.suffix.lower() == ".rfi":
        a = read_rfi(p).astype(np.float64)
        if a.shape[2] != 4:
            raise ImageFormatError(f"{p}: expected 4 channels, got {a.shape[2]}")
        return a
    if p.suffix.lower() == ".png":
        return read_png(p)
    raise ImageFormatError(f"{p}: unsupported image type {p.suffix!r}")


def save_frame(frame, stem) -> list[Path]:
    """Write ``stem.png`` and ``stem.rfi`` for a BlurFrame."""
    stem = Path(stem)
    png = write_png(stem.with_suffix(".png"), to_straight(frame.rgb, frame.alpha), frame.alpha)
    rfi = write_rfi(stem.with_suffix(".rfi"), frame.rgba())
    return [png, rfi]
