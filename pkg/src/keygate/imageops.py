"""Plain-numpy helpers on HWC float images in [0, 1].

These are deliberately graph-free; the differentiable counterparts used in
training live in :mod:`keygate.training`.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

# Rec.601 luminance weights.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ConfigurationError(f"{name} must be HWC with 1 or 3 channels, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"{name} must be float32 or float64, got {arr.dtype}")
    return arr


def clip01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def to_luminance(img: np.ndarray) -> np.ndarray:
    """HWC RGB -> HW luma (Rec.601).  Single-channel input passes through."""
    arr = check_image(img)
    if arr.shape[2] == 1:
        return arr[:, :, 0].astype(np.float64)
    return arr.astype(np.float64) @ _LUMA


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if sigma <= 0:
        raise ConfigurationError(f"gaussian sigma must be > 0, got {sigma}")
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur_image(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur with reflect padding, per channel."""
    arr = check_image(img).astype(np.float64)
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(arr, ((r, r), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(arr)
    for i, w in enumerate(k):
        out += w * padded[i : i + arr.shape[0]]
    padded = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(arr)
    for i, w in enumerate(k):
        out += w * padded[:, i : i + arr.shape[1]]
    return out.astype(img.dtype)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling, edges clamped."""
    arr = check_image(img).astype(np.float64)
    h, w = arr.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
    bot = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8 with round-half-away behavior via rint."""
    return np.rint(clip01(np.asarray(img)) * 255.0).astype(np.uint8)


def dequantize_u8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0).astype(np.float32)
