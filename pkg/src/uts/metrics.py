"""Tile-level confusion matrices, macro metrics, tissue ratios and complexity accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .classes import CLASS_NAMES

METRIC_NAMES = ("accuracy", "recall", "precision", "specificity", "dsc", "iou")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = self.counts.shape[0]
        if self.counts.shape != (n, n) or np.any(self.counts < 0):
            raise ValueError(f"confusion counts must be square and nonnegative, got {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


def confusion(y_true, y_pred, n_classes: int = len(CLASS_NAMES)) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels vs {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    per_class: dict[str, np.ndarray]
    macro: dict[str, float]
    confusion: ConfusionMatrix
    class_names: tuple[str, ...] = CLASS_NAMES

    def to_csv(self) -> str:
        lines = ["class," + ",".join(METRIC_NAMES)]
        for i, name in enumerate(self.class_names):
            vals = [self.per_class[m][i] for m in METRIC_NAMES]
            lines.append(name + "," + ",".join("" if np.isnan(v) else f"{v:.6f}" for v in vals))
        lines.append("macro," + ",".join(f"{self.macro[m]:.6f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        width = max(len(m) for m in METRIC_NAMES)
        rows = [f"Macro metrics over {self.confusion.total} tiles"]
        rows += [f"  {m.ljust(width)}  {self.macro[m]:.4f}" for m in METRIC_NAMES]
        return "\n".join(rows)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def macro_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class one-vs-rest metrics and their unweighted means.

    A metric whose denominator is empty scores 0 if the class occurs in the
    ground truth and is left out of the mean if it does not.
    """
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    tn = c.sum() - tp - fn - fp
    per_class = {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "recall": _ratio(tp, tp + fn),
        "precision": _ratio(tp, tp + fp),
        "specificity": _ratio(tn, tn + fp),
        "dsc": _ratio(2 * tp, 2 * tp + fp + fn),
        "iou": _ratio(tp, tp + fp + fn),
    }
    present = c.sum(axis=1) > 0
    macro = {}
    for name, vals in per_class.items():
        vals = np.where(np.isnan(vals) & present, 0.0, vals)
        per_class[name] = vals
        keep = vals[~np.isnan(vals)]
        macro[name] = float(keep.mean()) if keep.size else 0.0
    names = CLASS_NAMES if cm.n_classes == len(CLASS_NAMES) else tuple(
        f"class{i}" for i in range(cm.n_classes))
    return MetricsReport(per_class, macro, cm, names)


# -- tissue composition -------------------------------------------------------------


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``shares``."""
    shares = np.asarray(shares, dtype=np.float64)
    exact = shares / shares.sum() * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    # ties in the remainder favour the lower class index
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def tissue_ratios(labels, excluded=None, n_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Class percentages with two decimals that sum to exactly 100.00.

    ``labels`` is a labelled ``TileGrid`` (its excluded tiles are skipped) or a
    plain label sequence with an optional ``excluded`` mask.
    """
    if hasattr(labels, "tiles"):
        if labels.labels is None:
            raise ValueError("grid has no labels")
        labels, excluded = labels.labels, labels.excluded
    labels = np.asarray(labels, dtype=np.int64)
    if excluded is not None:
        labels = labels[~np.asarray(excluded, dtype=bool)]
    if labels.size == 0:
        raise ValueError("no included labelled tiles")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes})")
    counts = np.bincount(labels, minlength=n_classes)
    return largest_remainder(counts, 10000) / 100.0


def format_ratios(percentages, class_names=CLASS_NAMES) -> str:
    return ", ".join(f"{name.capitalize()}: {p:.2f}%" for name, p in zip(class_names, percentages))


# -- complexity ---------------------------------------------------------------------


@dataclass
class ComplexityReport:
    width: int
    height: int
    tile: int
    pixel_ops: int
    unit_ops: int
    tokens: int
    embed_dim: int
    unit_cost: float = field(init=False)

    def __post_init__(self):
        self.unit_cost = self.tokens ** 2 * self.embed_dim / self.tile ** 2

    @property
    def ratio(self) -> float:
        return self.pixel_ops / self.unit_ops

    def text(self) -> str:
        return "\n".join([
            f"image: {self.width}x{self.height}, tile k={self.tile}",
            f"pixel_ops (N = width*height): {self.pixel_ops}",
            f"unit_ops (tiles): {self.unit_ops}",
            f"ratio: {self.ratio:g}",
            f"unit-based cost M^2*D/k^2 with M={self.tokens}, D={self.embed_dim}: {self.unit_cost:g}",
        ])


def complexity_report(width: int, height: int, tile: int = 32, tokens: int = 16,
                      embed_dim: int = 64) -> ComplexityReport:
    """Pixel-level vs unit-level operation counts for one image."""
    if min(width, height, tile) < 1:
        raise ValueError("dimensions must be positive")
    units = (width // tile) * (height // tile)
    if units == 0:
        raise ValueError(f"{width}x{height} holds no {tile}x{tile} tile")
    return ComplexityReport(width, height, tile, width * height, units, tokens, embed_dim)


# -- label-noise variance trial --------------------------------------------------


@dataclass
class VarianceTrial:
    k: int
    p: float
    trials: int
    pixel_error_rate: float
    tile_majority_error_rate: float
    pixel_variance: float
    averaged_variance: float
    averaged_variance_se: float
    bound_holds: bool


def binomial_tail(n: int, p: float, at_least: int) -> float:
    return sum(math.comb(n, j) * p ** j * (1 - p) ** (n - j) for j in range(at_least, n + 1))


def variance_reduction_trial(k: int, p: float, trials: int = 100_000, seed: int = 0,
                             slack_se: float = 3.0) -> VarianceTrial:
    """Simulate ``k*k`` independent noisy binary pixel labels per tile.

    Each pixel's label is wrong with probability ``p``.  The tile label is the
    majority vote, counted wrong on ties.  Reports the empirical variance of
    the averaged label against ``p(1-p)/k^2`` with ``slack_se`` standard errors.
    """
    if not 0 <= p < 0.5:
        raise ValueError("flip probability must lie in [0, 0.5)")
    if k < 1 or trials < 2:
        raise ValueError("need k >= 1 and at least two trials")
    rng = np.random.default_rng(seed)
    n = k * k
    wrong = rng.random((trials, n)) < p
    n_wrong = wrong.sum(axis=1)
    tile_wrong = 2 * n_wrong >= n
    avg = wrong.mean(axis=1)
    pixel_var = float(wrong.var())
    avg_var = float(avg.var(ddof=1))
    dev2 = (avg - avg.mean()) ** 2
    se = float(dev2.std(ddof=1) / math.sqrt(trials))
    return VarianceTrial(
        k=k, p=p, trials=trials,
        pixel_error_rate=float(wrong.mean()),
        tile_majority_error_rate=float(tile_wrong.mean()),
        pixel_variance=pixel_var,
        averaged_variance=avg_var,
        averaged_variance_se=se,
        bound_holds=avg_var <= pixel_var / n + slack_se * se,
    )
