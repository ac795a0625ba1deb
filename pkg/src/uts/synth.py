"""Procedural three-class tissue-like images with exact tile labels and patient ids.

Textures: tumor is dense dark-purple blobs on pink, stroma a smooth
pink-to-green gradient, fat pale polygonal cells with white interiors and
thin pink membranes.  Everything is a pure function of the ``SynthSpec`` and seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classes import CLASS_NAMES, FAT, STROMA, TUMOR
from .imageio import write_image
from .tiling import TILE_SIZE, TileGrid, partition, write_manifest

DATASET_COLUMNS = ["roi_id", "patient_id", "label", "width", "height", "image", "tiles"]


@dataclass(frozen=True)
class SynthSpec:
    """One ROI: size, class layout and texture noise.

    ``layout`` is a class index for a class-pure ROI, or a ``(rows, cols)``
    array of per-tile classes for mixed ROIs.
    """

    width: int = 96
    height: int = 96
    layout: int | tuple = TUMOR
    noise: float = 8.0
    seed: int = 0
    patient_id: str = "p000"

    def __post_init__(self):
        if self.width % TILE_SIZE or self.height % TILE_SIZE or min(self.width, self.height) < TILE_SIZE:
            raise ValueError(f"ROI {self.width}x{self.height} is not a positive multiple of {TILE_SIZE}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    def tile_labels(self) -> np.ndarray:
        rows, cols = self.height // TILE_SIZE, self.width // TILE_SIZE
        if np.ndim(self.layout) == 0:
            lab = int(self.layout)
            if lab not in (TUMOR, STROMA, FAT):
                raise ValueError(f"unknown class {lab}")
            return np.full((rows, cols), lab, dtype=np.int64)
        arr = np.asarray(self.layout, dtype=np.int64)
        if arr.shape != (rows, cols):
            raise ValueError(f"layout {arr.shape} does not match the {rows}x{cols} tile grid")
        if arr.min() < 0 or arr.max() >= len(CLASS_NAMES):
            raise ValueError("layout holds an unknown class")
        return arr


def _tumor(h, w, rng):
    img = np.empty((h, w, 3))
    img[:] = (232, 172, 205)
    yy, xx = np.mgrid[0:h, 0:w]
    n_blobs = max(1, int(h * w / 40))
    cy = rng.uniform(0, h, n_blobs)
    cx = rng.uniform(0, w, n_blobs)
    rad = rng.uniform(1.5, 3.5, n_blobs)
    shade = np.zeros((h, w))
    for y, x, r in zip(cy, cx, rad):
        y0, y1 = max(0, int(y - r - 1)), min(h, int(y + r + 2))
        x0, x1 = max(0, int(x - r - 1)), min(w, int(x + r + 2))
        d2 = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2
        shade[y0:y1, x0:x1] = np.maximum(shade[y0:y1, x0:x1], (d2 <= r * r) * 1.0)
    dark = np.array([75, 35, 115])
    return img * (1 - shade[..., None]) + dark * shade[..., None]


def _stroma(h, w, rng):
    pink = np.array([224, 150, 178])
    green = np.array([165, 190, 150])
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = np.cos(angle) * xx / w + np.sin(angle) * yy / h
    t = (proj - proj.min()) / max(np.ptp(proj), 1e-9)
    # gentle fibre ripple along the gradient direction
    t = np.clip(t + 0.05 * np.sin(2 * np.pi * (proj * 3 + rng.uniform())), 0, 1)
    return pink * (1 - t[..., None]) + green * t[..., None]


def _fat(h, w, rng):
    cell = 11.0
    n = max(2, int(h * w / cell ** 2))
    pts = rng.uniform(0, 1, (n, 2)) * (h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.sqrt((yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2)
    d.sort(axis=-1)
    membrane = (d[..., 1] - d[..., 0]) < 1.4
    img = np.empty((h, w, 3))
    img[:] = (250, 247, 250)
    img[membrane] = (228, 170, 200)
    return img


TEXTURES = {TUMOR: _tumor, STROMA: _stroma, FAT: _fat}


def generate_roi(spec: SynthSpec) -> tuple[np.ndarray, TileGrid]:
    """Render ``spec`` as a uint8 image plus its ground-truth labelled grid."""
    labels = spec.tile_labels()
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    out = np.zeros((h, w, 3))
    k = TILE_SIZE
    for cls in np.unique(labels):
        tex = TEXTURES[int(cls)](h, w, rng)
        sel = np.kron(labels == cls, np.ones((k, k), dtype=bool))
        out[sel] = tex[sel]
    if spec.noise > 0:
        out += rng.normal(0.0, spec.noise, out.shape)
    image = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    grid = partition(image).with_labels(labels.reshape(-1))
    return image, grid


@dataclass(frozen=True)
class RoiRecord:
    roi_id: str
    patient_id: str
    label: int
    width: int
    height: int
    image: str = ""
    tiles: str = ""


@dataclass
class SynthDataset:
    records: list[RoiRecord]
    images: list[np.ndarray]
    grids: list[TileGrid]

    def tiles_and_labels(self, indices=None) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(N, 32, 32, 3)`` tiles in ``[0, 1]`` with their labels."""
        from .tiling import extract_tiles
        idx = range(len(self.records)) if indices is None else indices
        xs, ys = [], []
        for i in idx:
            xs.append(extract_tiles(self.images[i], self.grids[i]))
            ys.append(self.grids[i].labels)
        if not xs:
            return np.zeros((0, TILE_SIZE, TILE_SIZE, 3)), np.zeros(0, dtype=np.int64)
        return np.concatenate(xs), np.concatenate(ys)

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]


def _assign_patients(n_rois: int, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n_rois)
    owner = np.empty(n_rois, dtype=np.int64)
    pos = patient = 0
    while pos < n_rois:
        size = int(rng.integers(1, 4))
        owner[order[pos:pos + size]] = patient
        pos += size
        patient += 1
    return [f"p{int(o):03d}" for o in owner]


def generate_dataset(n_per_class: int, width: int = 96, height: int = 96, noise: float = 8.0,
                     seed: int = 0, out_dir=None) -> SynthDataset:
    """Class-pure ROIs, ``n_per_class`` of each class, grouped 1-3 per patient.

    With ``out_dir`` the images, per-ROI tile manifests and ``dataset.csv``
    are written there.
    """
    if n_per_class < 1:
        raise ValueError("need at least one ROI per class")
    root = np.random.SeedSequence(seed)
    patient_seed, *roi_seeds = root.spawn(1 + 3 * n_per_class)
    patients = _assign_patients(3 * n_per_class, np.random.default_rng(patient_seed))
    records, images, grids = [], [], []
    for i in range(3 * n_per_class):
        cls = i // n_per_class
        roi_seed = int(roi_seeds[i].generate_state(1)[0])
        spec = SynthSpec(width, height, cls, noise, roi_seed, patients[i])
        image, grid = generate_roi(spec)
        roi_id = f"roi{i:04d}"
        records.append(RoiRecord(roi_id, patients[i], cls, width, height,
                                 f"{roi_id}.png", f"{roi_id}.tiles.csv"))
        images.append(image)
        grids.append(grid)
    ds = SynthDataset(records, images, grids)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec, image, grid in zip(ds.records, ds.images, ds.grids):
        write_image(out / rec.image, image)
        write_manifest(grid, out / rec.tiles)
    path = out / "dataset.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DATASET_COLUMNS)
        for r in ds.records:
            writer.writerow([r.roi_id, r.patient_id, r.label, r.width, r.height, r.image, r.tiles])
    return path


def read_dataset(path) -> SynthDataset:
    """Load a dataset written by :func:`write_dataset` (``dataset.csv`` or its directory)."""
    from .imageio import read_image
    from .tiling import read_manifest
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.csv"
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_COLUMNS:
            raise ValueError(f"{path}: line 1: header must be {','.join(DATASET_COLUMNS)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DATASET_COLUMNS):
                raise ValueError(f"{path}: line {lineno}: expected {len(DATASET_COLUMNS)} fields")
            try:
                records.append(RoiRecord(row[0], row[1], int(row[2]), int(row[3]), int(row[4]),
                                         row[5], row[6]))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: label, width and height must be integers") from None
    images = [read_image(path.parent / r.image) for r in records]
    grids = [read_manifest(path.parent / r.tiles) for r in records]
    return SynthDataset(records, images, grids)
