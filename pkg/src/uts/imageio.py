"""8-bit RGB image files (PNG, PPM) as ``(H, W, 3)`` uint8 arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr, mode="RGB").save(path, format=fmt)


def check_rgb_image(image) -> np.ndarray:
    """Validate an 8-bit RGB raster and return it as a uint8 array."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) RGB image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise ValueError("RGB pixels must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr
