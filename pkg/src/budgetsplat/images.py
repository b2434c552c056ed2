"""Image codecs: 8-bit sRGB PNG in/out of linear float [0,1], and PFM depth.

Blending math assumes linear light, so PNGs are decoded through the standard
sRGB EOTF and renders are encoded back through its inverse.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def srgb_to_linear(srgb: np.ndarray) -> np.ndarray:
    srgb = np.asarray(srgb, dtype=np.float64)
    return np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(
        linear <= 0.0031308, linear * 12.92, 1.055 * linear ** (1.0 / 2.4) - 0.055
    )


def encode_u8(linear: np.ndarray) -> np.ndarray:
    """Linear float image -> 8-bit sRGB samples."""
    return (linear_to_srgb(linear) * 255.0 + 0.5).astype(np.uint8)


def decode_u8(u8: np.ndarray) -> np.ndarray:
    """8-bit sRGB samples -> linear float image."""
    return srgb_to_linear(np.asarray(u8, dtype=np.float64) / 255.0)


def quantize_linear(linear: np.ndarray) -> np.ndarray:
    """Round-trip a linear image through 8-bit sRGB (the on-disk precision)."""
    return decode_u8(encode_u8(linear))


def save_png(path, linear: np.ndarray) -> None:
    u8 = encode_u8(linear)
    if u8.ndim == 2:
        u8 = np.repeat(u8[:, :, None], 3, axis=2)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Decode a PNG to a linear float (H, W, 3) image."""
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return decode_u8(u8)


def save_pfm(path, data: np.ndarray) -> None:
    """Grayscale little-endian PFM (bottom-up row order per the format)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("save_pfm expects a 2D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"not a grayscale PFM: header {header!r}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        buf = f.read(w * h * 4)
        if len(buf) != w * h * 4:
            raise ValueError("truncated PFM payload")
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(buf, dtype=dt).reshape(h, w)
    return np.flipud(data).astype(np.float32)
