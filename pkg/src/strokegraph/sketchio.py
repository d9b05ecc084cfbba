"""Dataset ingestion (MNIST IDX, QuickDraw ndjson), rasterisation and
raster-level normalisation."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConsistencyError, EmptySketchError, FormatError

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

FOREGROUND_THRESHOLD = 0.5
QUICKDRAW_CANVAS = 256

MNIST_DIGITS = tuple(str(d) for d in range(10))
QUICKDRAW_SHAPES = ("circle", "hexagon", "line", "octagon", "square", "triangle", "zigzag")
QUICKDRAW_BODY = ("arm", "ear", "elbow", "face", "finger", "foot", "hand", "nose", "toe", "tooth")


@dataclass(frozen=True)
class RasterImage:
    """Row-major grayscale image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise FormatError(f"raster must be a non-empty 2-D grid, got shape {px.shape}")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise FormatError("raster intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def foreground(self, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
        return self.pixels > threshold

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.all(self.pixels == other.pixels))

    __hash__ = None


@dataclass
class LabeledSample:
    image: RasterImage
    label: int
    source_id: str


@dataclass
class QuickdrawRecord:
    category: str
    polylines: list[np.ndarray]

    def __post_init__(self):
        cleaned = []
        for i, pl in enumerate(self.polylines):
            arr = np.asarray(pl, dtype=np.float64).reshape(-1, 2)
            if len(arr) < 2:
                raise FormatError(
                    f"QuickDraw record {self.category!r}: polyline {i} has {len(arr)} point(s), need >= 2"
                )
            cleaned.append(arr)
        self.polylines = cleaned


@dataclass
class DatasetSplit:
    train: list[LabeledSample]
    validation: list[LabeledSample]
    test: list[LabeledSample]
    category_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for part in (self.train, self.validation, self.test):
            ids = {s.source_id for s in part}
            if ids & seen:
                raise ConsistencyError("dataset splits share source ids")
            seen |= ids


# ---------------------------------------------------------------- MNIST IDX


def _read_idx_header(path: str, magic: int, ndim: int) -> tuple[bytes, tuple[int, ...]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: file too short for an IDX header")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic {found}, expected {magic}")
    dims = struct.unpack(">" + "i" * ndim, raw[4 : 4 + 4 * ndim])
    return raw[4 + 4 * ndim :], dims


def load_mnist_idx(images_path: str, labels_path: str) -> list[LabeledSample]:
    """Read an MNIST image/label IDX pair into samples scaled to [0, 1]."""
    img_payload, (count, rows, cols) = _read_idx_header(images_path, IDX_IMAGE_MAGIC, 3)
    lab_payload, (lab_count,) = _read_idx_header(labels_path, IDX_LABEL_MAGIC, 1)
    if count != lab_count:
        raise ConsistencyError(f"{images_path} declares {count} images but {labels_path} declares {lab_count} labels")
    need = count * rows * cols
    if len(img_payload) < need:
        raise ConsistencyError(f"{images_path}: header promises {need} pixel bytes, found {len(img_payload)}")
    if len(lab_payload) < count:
        raise ConsistencyError(f"{labels_path}: header promises {count} labels, found {len(lab_payload)}")
    pixels = np.frombuffer(img_payload, dtype=np.uint8, count=need).reshape(count, rows, cols)
    labels = np.frombuffer(lab_payload, dtype=np.uint8, count=count)
    stem = os.path.basename(images_path)
    return [
        LabeledSample(RasterImage(pixels[i] / 255.0), int(labels[i]), f"{stem}:{i}")
        for i in range(count)
    ]


def write_mnist_idx(images: np.ndarray, labels: Sequence[int], images_path: str, labels_path: str) -> None:
    """Write uint8 images ``(count, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ----------------------------------------------------------------- QuickDraw


def parse_quickdraw_line(line: str) -> QuickdrawRecord:
    try:
        obj = json.loads(line)
        category = obj["word"]
        drawing = obj["drawing"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed QuickDraw record: {exc}") from exc
    polylines = []
    for stroke in drawing:
        if len(stroke) < 2 or len(stroke[0]) != len(stroke[1]):
            raise FormatError(f"QuickDraw record {category!r}: stroke coordinate arrays are unpaired")
        polylines.append(np.column_stack([stroke[0], stroke[1]]))
    return QuickdrawRecord(category, polylines)


def load_quickdraw_ndjson(path: str, limit: int | None = None) -> list[QuickdrawRecord]:
    """Read newline-delimited QuickDraw records; unknown fields are ignored."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            out.append(parse_quickdraw_line(line))
            if limit is not None and len(out) >= limit:
                break
    return out


def render_quickdraw(record: QuickdrawRecord, canvas: int = QUICKDRAW_CANVAS, backend: str | None = None) -> RasterImage:
    """Draw a record's polylines as 1-px lines on a ``canvas`` square."""
    if canvas < 2:
        raise ValueError("canvas must be >= 2 pixels")
    if not record.polylines:
        raise FormatError(f"QuickDraw record {record.category!r} has no polylines")
    pts = np.concatenate(record.polylines)
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    scale = (canvas - 1) / extent if extent > 0 else 1.0
    scaled = [(pl - lo) * scale for pl in record.polylines]
    return RasterImage(kernels.draw_polylines((canvas, canvas), scaled, backend=backend))


def split_quickdraw(
    records: Iterable[QuickdrawRecord],
    categories: Sequence[str],
    per_category: tuple[int, int, int] = (1000, 100, 100),
    seed: int = 0,
    canvas: int = QUICKDRAW_CANVAS,
) -> DatasetSplit:
    """Render and split records into train/validation/test per category."""
    by_cat: dict[str, list[tuple[int, QuickdrawRecord]]] = {c: [] for c in categories}
    for i, rec in enumerate(records):
        if rec.category in by_cat:
            by_cat[rec.category].append((i, rec))
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    need = sum(per_category)
    for label, cat in enumerate(categories):
        items = by_cat[cat]
        if len(items) < need:
            raise ConsistencyError(f"category {cat!r} has {len(items)} records, split needs {need}")
        order = rng.permutation(len(items))[:need]
        bounds = np.cumsum((0,) + tuple(per_category))
        for k in range(3):
            for j in order[bounds[k] : bounds[k + 1]]:
                idx, rec = items[j]
                parts[k].append(LabeledSample(render_quickdraw(rec, canvas), label, f"quickdraw:{cat}:{idx}"))
    return DatasetSplit(*parts, category_names=list(categories))


# -------------------------------------------------------------- normalisation


def balanced_subsets(
    samples: Sequence[LabeledSample], per_class: Sequence[int], seed: int = 0
) -> list[list[LabeledSample]]:
    """Disjoint class-balanced subsets, ``per_class[k]`` samples of every
    class in subset ``k``. Selection is a seeded shuffle within each class;
    each subset is returned in shuffled order."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[LabeledSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    need = sum(per_class)
    out: list[list[LabeledSample]] = [[] for _ in per_class]
    for label in sorted(by_class):
        pool = by_class[label]
        if len(pool) < need:
            raise ConsistencyError(f"class {label} has {len(pool)} samples, {need} requested")
        order = rng.permutation(len(pool))
        start = 0
        for k, count in enumerate(per_class):
            out[k].extend(pool[i] for i in order[start : start + count])
            start += count
    return [[part[i] for i in rng.permutation(len(part))] for part in out]


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def normalize_pad_dilate(
    image: RasterImage,
    target: int = 224,
    pad: int = 40,
    dilation: int = 4,
    threshold: float = FOREGROUND_THRESHOLD,
) -> RasterImage:
    """Crop to the foreground box, scale its longer side to ``target``, shift it
    to the top-left, zero-pad by ``pad`` on each side and dilate with a disk.

    The output is binary and ``target + 2 * pad`` pixels square.
    """
    fg = image.foreground(threshold)
    if not fg.any():
        raise EmptySketchError("image has no foreground above the binarisation threshold")
    rows = np.nonzero(fg.any(axis=1))[0]
    cols = np.nonzero(fg.any(axis=0))[0]
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    crop = image.pixels[r0:r1, c0:c1]
    h, w = crop.shape
    scale = target / max(h, w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    if (new_h, new_w) == (h, w):
        sub = crop > threshold
    elif scale > 1.0:
        resized = ndimage.zoom(crop, (new_h / h, new_w / w), order=1, mode="nearest", grid_mode=False)
        sub = resized[:new_h, :new_w] >= threshold
    else:
        # splat foreground pixel centres; keeps 1-px lines 8-connected
        sub = np.zeros((new_h, new_w), dtype=bool)
        rr, cc = np.nonzero(crop > threshold)
        sy = (new_h - 1) / (h - 1) if h > 1 else 0.0
        sx = (new_w - 1) / (w - 1) if w > 1 else 0.0
        sub[np.rint(rr * sy).astype(int), np.rint(cc * sx).astype(int)] = True
    side = target + 2 * pad
    mask = np.zeros((side, side), dtype=bool)
    mask[pad : pad + sub.shape[0], pad : pad + sub.shape[1]] = sub
    if dilation > 0:
        mask = ndimage.binary_dilation(mask, structure=disk(dilation))
    return RasterImage(mask.astype(np.float64))


__all__ = [
    "RasterImage",
    "LabeledSample",
    "QuickdrawRecord",
    "DatasetSplit",
    "load_mnist_idx",
    "write_mnist_idx",
    "parse_quickdraw_line",
    "load_quickdraw_ndjson",
    "render_quickdraw",
    "split_quickdraw",
    "normalize_pad_dilate",
    "disk",
    "balanced_subsets",
    "MNIST_DIGITS",
    "QUICKDRAW_SHAPES",
    "QUICKDRAW_BODY",
]
