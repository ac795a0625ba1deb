"""Tissue classes and their display colours."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("tumor", "stroma", "fat")
TUMOR, STROMA, FAT = range(3)


@dataclass(frozen=True)
class Palette:
    """Ordered class colours; index ``i`` paints class ``i``."""

    names: tuple[str, ...] = CLASS_NAMES
    colors: tuple[tuple[int, int, int], ...] = ((255, 0, 0), (0, 255, 0), (255, 255, 0))

    def __post_init__(self):
        if len(self.names) != len(self.colors):
            raise ValueError("palette needs one colour per class")
        if len(set(self.colors)) != len(self.colors):
            raise ValueError("palette colours must be pairwise distinct")

    def array(self) -> np.ndarray:
        return np.array(self.colors, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.colors)


DEFAULT_PALETTE = Palette()
