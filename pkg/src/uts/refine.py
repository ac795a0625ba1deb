"""Refinement of tile-blocky colour masks: box smoothing, palette snapping, overlay.

Windows of width ``w`` cover offsets ``[-(w // 2), w - 1 - w // 2]`` along
each axis, so ``w = 48`` spans ``[-24, +23]`` and odd windows are centred.
Near the border the window is clamped to the image and the mean divides by
the number of in-bounds samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .classes import DEFAULT_PALETTE, Palette
from .imageio import check_rgb_image

RAW, SMOOTHED, DISCRETE = "raw", "smoothed", "discrete"
BLACK = (0, 0, 0)


@dataclass
class ColorMask:
    """RGB segmentation raster in one of three states (raw, smoothed, discrete)."""

    pixels: np.ndarray
    state: str = RAW

    def __post_init__(self):
        if self.state not in (RAW, SMOOTHED, DISCRETE):
            raise ValueError(f"unknown mask state {self.state!r}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"mask must be (H, W, 3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_uint8(self) -> np.ndarray:
        return round_half_away(self.pixels)

    def colors(self) -> set[tuple[int, int, int]]:
        flat = self.to_uint8().reshape(-1, 3)
        return {tuple(int(v) for v in c) for c in np.unique(flat, axis=0)}


@dataclass
class OpCounter:
    """Multiply-adds spent per output sample."""

    multiply_adds: int = 0
    samples: int = 0
    max_per_sample: float = 0.0

    @property
    def per_sample(self) -> float:
        return self.multiply_adds / self.samples if self.samples else 0.0


def window_offsets(window: int) -> tuple[int, int]:
    left = window // 2
    return left, window - 1 - left


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Nearest integer with halves away from zero, clamped to ``[0, 255]``."""
    v = np.asarray(values, dtype=np.float64)
    r = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(r, 0, 255).astype(np.uint8)


def _axis_slice(ndim: int, axis: int, sl: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = sl
    return tuple(idx)


def _box_pass(a: np.ndarray, window: int, axis: int, counter: OpCounter | None):
    """1-D clamped box mean along ``axis``; counts one multiply-add per sample used."""
    n = a.shape[axis]
    left, right = window_offsets(window)
    acc = np.zeros_like(a)
    count = np.zeros(n)
    for off in range(-left, right + 1):
        lo, hi = max(0, -off), min(n, n - off)
        if lo >= hi:
            continue
        acc[_axis_slice(a.ndim, axis, slice(lo, hi))] += a[_axis_slice(a.ndim, axis, slice(lo + off, hi + off))]
        count[lo:hi] += 1
    if counter is not None:
        others = a.size // n
        counter.multiply_adds += int(count.sum()) * others
    shape = [1] * a.ndim
    shape[axis] = n
    return acc / count.reshape(shape), count


def smooth_separable(mask: ColorMask, window: int = 48,
                     counter: OpCounter | None = None) -> ColorMask:
    """Local mean via one horizontal then one vertical 1-D pass."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > mask.width and window > mask.height:
        raise ValueError(f"window {window} exceeds both mask dimensions {mask.width}x{mask.height}")
    s = np.asarray(mask.pixels, dtype=np.float64)
    horiz, nh = _box_pass(s, window, axis=1, counter=counter)
    out, nv = _box_pass(horiz, window, axis=0, counter=counter)
    if counter is not None:
        counter.samples += s.size
        counter.max_per_sample = float(nh.max() + nv.max())
    return ColorMask(out, SMOOTHED)


def direct_box_mean(mask: ColorMask, window: int, counter: OpCounter | None = None) -> np.ndarray:
    """Clamped 2-D windowed mean accumulated over every ``window x window`` offset."""
    s = np.asarray(mask.pixels, dtype=np.float64)
    h, w = s.shape[:2]
    left, right = window_offsets(window)
    acc = np.zeros_like(s)
    count = np.zeros((h, w))
    for dy in range(-left, right + 1):
        y0, y1 = max(0, -dy), min(h, h - dy)
        if y0 >= y1:
            continue
        for dx in range(-left, right + 1):
            x0, x1 = max(0, -dx), min(w, w - dx)
            if x0 >= x1:
                continue
            acc[y0:y1, x0:x1] += s[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            count[y0:y1, x0:x1] += 1
    if counter is not None:
        counter.multiply_adds += int(count.sum()) * s.shape[2]
        counter.samples += s.size
        counter.max_per_sample = float(count.max())
    return acc / count[..., None]


def direct_op_count(height: int, width: int, window: int) -> int:
    """Multiply-adds per channel the direct 2-D mean performs (clamped windows)."""
    def axis_counts(n):
        left, right = window_offsets(window)
        i = np.arange(n)
        return np.minimum(i + right, n - 1) - np.maximum(i - left, 0) + 1
    return int(axis_counts(height).sum() * axis_counts(width).sum())


def discretize(mask: ColorMask, palette: Palette = DEFAULT_PALETTE,
               null_class: bool = False) -> ColorMask:
    """Snap each pixel to the nearest palette colour (Euclidean in RGB).

    Ties go to the lowest class index.  With ``null_class`` black is an extra
    target, ranked after every palette colour.
    """
    targets = palette.array()
    if null_class:
        targets = np.vstack([targets, np.zeros((1, 3))])
    px = np.asarray(mask.pixels, dtype=np.float64)
    d2 = ((px[:, :, None, :] - targets[None, None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.argmin(axis=-1)
    return ColorMask(targets[nearest].astype(np.uint8), DISCRETE)


def overlay(s_d: ColorMask, image, alpha: float = 0.5) -> np.ndarray:
    """``alpha * mask + (1 - alpha) * image`` per channel, rounded half away from zero."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    img = check_rgb_image(image)
    if img.shape != s_d.pixels.shape:
        raise ValueError(f"mask {s_d.pixels.shape} and image {img.shape} differ in size")
    blend = alpha * s_d.pixels.astype(np.float64) + (1.0 - alpha) * img.astype(np.float64)
    return round_half_away(blend)


@dataclass
class RefineResult:
    smoothed: ColorMask
    discrete: ColorMask
    overlay: np.ndarray
    ops: dict = field(default_factory=dict)


def refine_pipeline(mask: ColorMask, image, palette: Palette = DEFAULT_PALETTE,
                    window: int = 48, alpha: float = 0.5, freeze_excluded: bool = False,
                    null_class: bool = False) -> RefineResult:
    """Smooth, discretize and overlay; also report the smoothing operation counts."""
    counter = OpCounter()
    s_f = smooth_separable(mask, window, counter)
    s_d = discretize(s_f, palette, null_class=null_class)
    if freeze_excluded:
        black = np.all(np.asarray(mask.pixels) == 0, axis=-1)
        s_d.pixels[black] = 0
    out = overlay(s_d, image, alpha)
    direct = direct_op_count(mask.height, mask.width, window)
    ops = {
        "window": window,
        "pixels": mask.height * mask.width,
        "separable_per_pixel": counter.multiply_adds / counter.samples,
        "separable_max_per_pixel": counter.max_per_sample,
        "direct_per_pixel": direct / (mask.height * mask.width),
        "direct_max_per_pixel": float(min(window, mask.height) * min(window, mask.width)),
    }
    ops["reduction"] = ops["direct_max_per_pixel"] / ops["separable_max_per_pixel"]
    ops["mean_reduction"] = ops["direct_per_pixel"] / ops["separable_per_pixel"]
    return RefineResult(s_f, s_d, out, ops)


class SegmentationRefiner(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` maps a raw colour mask to its discretized refinement.

    Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, window: int = 48, palette: Palette = DEFAULT_PALETTE,
                 null_class: bool = False):
        self.window = window
        self.palette = palette
        self.null_class = null_class

    def fit(self, X=None, y=None):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self.n_classes_ = len(self.palette)
        return self

    def transform(self, X) -> np.ndarray:
        pixels = np.asarray(X.pixels if isinstance(X, ColorMask) else X)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) mask, got {pixels.shape}")
        smoothed = smooth_separable(ColorMask(pixels.astype(np.float64)), self.window)
        return discretize(smoothed, self.palette, self.null_class).pixels
