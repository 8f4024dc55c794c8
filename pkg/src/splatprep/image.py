"""8-bit image helpers shared by the frame tooling.

Grayscale images are plain (H, W) uint8 arrays in row-major order; binary
masks are (H, W) bool arrays of the same shape.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Weighted luma conversion, rounded to the nearest integer level.

    Accepts (H, W) uint8 (returned as-is) or (H, W, 3) uint8.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        return rgb.astype(np.uint8, copy=False)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3) array, got {rgb.shape}")
    luma = rgb.astype(np.float64) @ _LUMA
    return np.floor(luma + 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read a PNG or PPM file as uint8, (H, W) for grayscale or (H, W, 3) for color."""
    with Image.open(path) as img:
        if img.mode in ("L", "I;16"):
            return np.asarray(img.convert("L"), dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def load_grayscale(path) -> np.ndarray:
    return to_grayscale(load_image(path))


def save_image(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def resize_image(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to (height, width)."""
    arr = np.asarray(arr, dtype=np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    out = Image.fromarray(arr, mode=mode).resize((width, height), Image.BILINEAR)
    return np.asarray(out, dtype=np.uint8)


def otsu_threshold(img: np.ndarray) -> int:
    """Threshold maximizing inter-class variance; ties go to the lowest level.

    The classes are {value <= t} and {value > t}, matching binarize().
    """
    img = np.asarray(img, dtype=np.uint8)
    hist = np.bincount(img.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise ValueError("empty image")
    w0 = np.cumsum(hist)                      # weight of the low class at each t
    mass = np.cumsum(hist * np.arange(256))   # intensity mass of the low class
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    var_between = np.zeros(256)
    mu0 = np.divide(mass, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(mass[-1] - mass, w1, out=np.zeros(256), where=w1 > 0)
    var_between[valid] = w0[valid] * w1[valid] * (mu0[valid] - mu1[valid]) ** 2
    return int(np.argmax(var_between))


def binarize(img: np.ndarray, threshold: int | None = None) -> np.ndarray:
    """Boolean content mask: pixel > threshold. None picks the Otsu threshold."""
    img = np.asarray(img, dtype=np.uint8)
    if threshold is None:
        threshold = otsu_threshold(img)
    return img > threshold
