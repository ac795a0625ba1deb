"""Fixed-size tile grids over RGB images, tile manifests and mask assembly."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .classes import CLASS_NAMES, DEFAULT_PALETTE, Palette
from .imageio import check_rgb_image, write_image
from .refine import RAW, ColorMask

TILE_SIZE = 32
MANIFEST_MAGIC = "# uts-tile-manifest v1"
MANIFEST_COLUMNS = ["index", "col", "row", "pixel_x", "pixel_y", "excluded", "label"] + [
    f"p_{name}" for name in CLASS_NAMES]


@dataclass(frozen=True)
class Tile:
    col: int
    row: int
    pixel_x: int
    pixel_y: int
    excluded: bool = False


@dataclass
class TileGrid:
    """Row-major grid of full tiles over a ``width x height`` image."""

    width: int
    height: int
    tile_size: int
    cols: int
    rows: int
    tiles: list[Tile] = field(default_factory=list)
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        if len(self.tiles) != self.cols * self.rows:
            raise ValueError(f"{len(self.tiles)} tiles for a {self.cols}x{self.rows} grid")
        for t in self.tiles:
            if (t.pixel_x, t.pixel_y) != (t.col * self.tile_size, t.row * self.tile_size):
                raise ValueError(f"tile {t} offsets disagree with its grid position")
            if t.pixel_x + self.tile_size > self.width or t.pixel_y + self.tile_size > self.height:
                raise ValueError(f"tile {t} extends past the {self.width}x{self.height} image")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.tiles),):
                raise ValueError("labels need one entry per tile")
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != (len(self.tiles), len(CLASS_NAMES)):
                raise ValueError(f"probs must be ({len(self.tiles)}, {len(CLASS_NAMES)})")

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    @property
    def excluded(self) -> np.ndarray:
        return np.array([t.excluded for t in self.tiles], dtype=bool)

    def with_labels(self, labels, probs=None) -> "TileGrid":
        return replace(self, labels=np.asarray(labels), probs=probs)

    def index_of(self, col: int, row: int) -> int:
        if not (0 <= col < self.cols and 0 <= row < self.rows):
            raise IndexError(f"tile ({col}, {row}) outside the {self.cols}x{self.rows} grid")
        return row * self.cols + col


def _luminance(block: np.ndarray) -> float:
    rgb = block.reshape(-1, 3).astype(np.float64)
    return float((rgb @ np.array([0.299, 0.587, 0.114])).mean())


def partition(image, tile_size: int = TILE_SIZE, blank_threshold: float | None = None) -> TileGrid:
    """Cut ``image`` into non-overlapping full tiles, dropping partial border strips.

    With ``blank_threshold`` set, tiles whose mean luminance (0-255) exceeds it
    are flagged excluded but keep their place in the grid.
    """
    img = check_rgb_image(image)
    h, w = img.shape[:2]
    cols, rows = w // tile_size, h // tile_size
    if cols == 0 or rows == 0:
        raise ValueError(f"image {w}x{h} is smaller than one {tile_size}x{tile_size} tile")
    tiles = []
    for r in range(rows):
        for c in range(cols):
            x, y = c * tile_size, r * tile_size
            excluded = False
            if blank_threshold is not None:
                excluded = _luminance(img[y:y + tile_size, x:x + tile_size]) > blank_threshold
            tiles.append(Tile(c, r, x, y, excluded))
    return TileGrid(w, h, tile_size, cols, rows, tiles)


def extract_tile(image, grid: TileGrid, index: int) -> np.ndarray:
    """Crop tile ``index`` and scale its pixels to ``[0, 1]``."""
    if not 0 <= index < grid.n_tiles:
        raise IndexError(f"tile index {index} outside [0, {grid.n_tiles})")
    img = np.asarray(image)
    t = grid.tiles[index]
    k = grid.tile_size
    return img[t.pixel_y:t.pixel_y + k, t.pixel_x:t.pixel_x + k].astype(np.float64) / 255.0


def extract_tiles(image, grid: TileGrid) -> np.ndarray:
    """All tiles stacked as ``(N, k, k, 3)`` in grid order."""
    img = check_rgb_image(image)
    k = grid.tile_size
    crop = img[:grid.rows * k, :grid.cols * k].astype(np.float64) / 255.0
    blocks = crop.reshape(grid.rows, k, grid.cols, k, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(-1, k, k, 3)


def assemble_mask(grid: TileGrid, palette: Palette = DEFAULT_PALETTE) -> ColorMask:
    """Paint each labelled tile its class colour; excluded tiles and uncovered strips stay black."""
    if grid.labels is None:
        raise ValueError("grid has no labels")
    excluded = grid.excluded
    pixels = np.zeros((grid.height, grid.width, 3), dtype=np.uint8)
    colors = np.array(palette.colors, dtype=np.uint8)
    k = grid.tile_size
    for i, t in enumerate(grid.tiles):
        if excluded[i]:
            continue
        lab = int(grid.labels[i])
        if not 0 <= lab < len(palette):
            raise ValueError(f"included tile {i} has no valid label ({lab})")
        pixels[t.pixel_y:t.pixel_y + k, t.pixel_x:t.pixel_x + k] = colors[lab]
    return ColorMask(pixels, RAW)


def export_tiles(image, grid: TileGrid, directory) -> list[Path]:
    """Write every tile as ``r{row}_c{col}.png``."""
    img = check_rgb_image(image)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    k = grid.tile_size
    paths = []
    for t in grid.tiles:
        p = out / f"r{t.row}_c{t.col}.png"
        write_image(p, img[t.pixel_y:t.pixel_y + k, t.pixel_x:t.pixel_x + k])
        paths.append(p)
    return paths


# -- manifest -------------------------------------------------------------------


def format_manifest(grid: TileGrid) -> str:
    buf = io.StringIO()
    buf.write(MANIFEST_MAGIC + "\n")
    buf.write(f"# width={grid.width} height={grid.height} tile_size={grid.tile_size} "
              f"cols={grid.cols} rows={grid.rows}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for i, t in enumerate(grid.tiles):
        label = "" if grid.labels is None else str(int(grid.labels[i]))
        probs = ["", "", ""] if grid.probs is None else [repr(float(v)) for v in grid.probs[i]]
        writer.writerow([i, t.col, t.row, t.pixel_x, t.pixel_y, int(t.excluded), label] + probs)
    return buf.getvalue()


def write_manifest(grid: TileGrid, path) -> None:
    Path(path).write_text(format_manifest(grid))


def parse_manifest(text: str, source: str = "<manifest>") -> TileGrid:
    lines = text.splitlines()

    def fail(lineno, msg):
        raise ValueError(f"{source}: line {lineno}: {msg}")

    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        fail(1, f"expected {MANIFEST_MAGIC!r}")
    if len(lines) < 3:
        fail(len(lines) + 1, "missing geometry or header line")
    meta_line = lines[1]
    if not meta_line.startswith("#"):
        fail(2, "expected '# width=... height=... tile_size=... cols=... rows=...'")
    meta = {}
    for item in meta_line[1:].split():
        key, sep, value = item.partition("=")
        if not sep or not value.isdigit():
            fail(2, f"malformed geometry field {item!r}")
        meta[key] = int(value)
    needed = {"width", "height", "tile_size", "cols", "rows"}
    if set(meta) != needed:
        fail(2, f"geometry fields must be exactly {sorted(needed)}")
    if lines[2].split(",") != MANIFEST_COLUMNS:
        fail(3, f"header must be {','.join(MANIFEST_COLUMNS)}")
    tiles, labels, probs = [], [], []
    for lineno, row in enumerate(csv.reader(lines[3:]), start=4):
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            fail(lineno, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
        try:
            index, col, r, px, py, excl = (int(v) for v in row[:6])
        except ValueError:
            fail(lineno, "geometry fields must be integers")
        if index != len(tiles):
            fail(lineno, f"index {index} out of sequence")
        if excl not in (0, 1):
            fail(lineno, "excluded must be 0 or 1")
        tiles.append(Tile(col, r, px, py, bool(excl)))
        labels.append(row[6])
        probs.append(row[7:])
    has_labels = [v != "" for v in labels]
    has_probs = [any(v != "" for v in p) for p in probs]
    if any(has_labels) and not all(has_labels):
        fail(4 + has_labels.index(False), "label missing while other rows carry labels")
    if any(has_probs) and not all(has_probs):
        fail(4 + has_probs.index(False), "probabilities missing while other rows carry them")
    label_arr = prob_arr = None
    try:
        if all(has_labels) and labels:
            label_arr = np.array([int(v) for v in labels], dtype=np.int64)
        if all(has_probs) and probs:
            prob_arr = np.array([[float(v) for v in p] for p in probs])
    except ValueError as exc:
        fail(4, f"bad label or probability value ({exc})")
    try:
        return TileGrid(meta["width"], meta["height"], meta["tile_size"], meta["cols"],
                        meta["rows"], tiles, label_arr, prob_arr)
    except ValueError as exc:
        fail(3, str(exc))


def read_manifest(path) -> TileGrid:
    path = Path(path)
    return parse_manifest(path.read_text(), str(path))


class TileExtractor(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` turns one RGB image into its ``(N, k, k, 3)`` tile stack."""

    def __init__(self, tile_size: int = TILE_SIZE, blank_threshold: float | None = None,
                 drop_excluded: bool = False):
        self.tile_size = tile_size
        self.blank_threshold = blank_threshold
        self.drop_excluded = drop_excluded

    def fit(self, X=None, y=None):
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        return self

    def transform(self, X) -> np.ndarray:
        grid = partition(X, self.tile_size, self.blank_threshold)
        tiles = extract_tiles(X, grid)
        if self.drop_excluded:
            tiles = tiles[~grid.excluded]
        return tiles
