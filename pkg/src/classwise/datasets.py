"""Datasets: IDX digit files, synthetic blobs, and background manipulation.

Images always travel as float arrays of shape (N, channels, H, W) with every
pixel in [0, 1]; labels are integer class ids below `class_count`.  All
transforms return new datasets; nothing here mutates its input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray          # (N, channels, H, W), float32, values in [0, 1]
    labels: np.ndarray          # (N,), int64, values in [0, class_count)
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"dataset: images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"dataset: {self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("dataset: pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"dataset: label outside [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self) -> list[np.ndarray]:
        """Index lists per class; together they partition range(N)."""
        return [np.flatnonzero(self.labels == c) for c in range(self.class_count)]

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(
            self.images[indices], self.labels[indices],
            self.class_count, split or self.split,
        )


def stratified_subset(ds: LabeledDataset, size: int, seed: int = 0) -> LabeledDataset:
    """Per-class-balanced random subset of `size` examples (as evenly as possible)."""
    if size >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    per_class = size // ds.class_count
    extra = size % ds.class_count
    picks = []
    for c, idx in enumerate(ds.class_indices()):
        want = per_class + (1 if c < extra else 0)
        if want > idx.size:
            raise ValueError(f"stratified_subset: class {c} has only {idx.size} examples")
        picks.append(rng.choice(idx, size=want, replace=False))
    return ds.subset(np.sort(np.concatenate(picks)))


# ---------------------------------------------------------------------------
# IDX files (big-endian; bit-exact format conformance)
# ---------------------------------------------------------------------------

def _read_be32(buf: bytes, offset: int, path, what: str) -> int:
    if offset + 4 > len(buf):
        raise ValueError(f"idx: {path}: truncated reading {what} at byte {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_mnist_idx(images_path, labels_path, split: str = "train",
                   class_count: int = 10) -> LabeledDataset:
    """Load an IDX image/label file pair (the MNIST wire format).

    Image file: magic 0x00000803, then N, rows, cols (all 32-bit big-endian),
    then N*rows*cols unsigned bytes.  Label file: magic 0x00000801, then N,
    then N bytes.  Pixels map to byte/255.
    """
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()

    magic = _read_be32(ibuf, 0, images_path, "magic")
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(
            f"idx: {images_path}: bad image magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
        )
    n = _read_be32(ibuf, 4, images_path, "count")
    rows = _read_be32(ibuf, 8, images_path, "rows")
    cols = _read_be32(ibuf, 12, images_path, "cols")
    if len(ibuf) != 16 + n * rows * cols:
        raise ValueError(
            f"idx: {images_path}: expected {16 + n * rows * cols} bytes, "
            f"file ends at byte {len(ibuf)}"
        )

    lmagic = _read_be32(lbuf, 0, labels_path, "magic")
    if lmagic != IDX_LABEL_MAGIC:
        raise ValueError(
            f"idx: {labels_path}: bad label magic 0x{lmagic:08x} at byte 0 "
            f"(expected 0x{IDX_LABEL_MAGIC:08x})"
        )
    ln = _read_be32(lbuf, 4, labels_path, "count")
    if ln != n:
        raise ValueError(
            f"idx: {labels_path}: label count {ln} at byte 4 does not match "
            f"image count {n}"
        )
    if len(lbuf) != 8 + n:
        raise ValueError(f"idx: {labels_path}: expected {8 + n} bytes, file ends at byte {len(lbuf)}")

    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= class_count:
        raise ValueError(f"idx: {labels_path}: label {labels.max()} outside [0, {class_count})")
    return LabeledDataset(images, labels, class_count, split)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def generate_synthetic(classes: int, per_class: int, dimension: int, seed: int,
                       noise: float = 0.08, radius: float = 0.3,
                       split: str = "train") -> LabeledDataset:
    """Gaussian blobs with class means on a circle, clipped to [0, 1].

    The circle lives in the first two feature dimensions (centered at 0.5);
    remaining dimensions are noise around 0.5.  With `dimension == 1` the
    means are spread evenly along the single axis instead.  Deterministic
    per seed.  Images come out as (N, 1, 1, dimension).
    """
    if classes < 2:
        raise ValueError("generate_synthetic: need at least 2 classes")
    if per_class < 1:
        raise ValueError("generate_synthetic: need at least 1 example per class")
    if dimension < 1:
        raise ValueError("generate_synthetic: dimension must be positive")
    rng = np.random.default_rng(seed)
    means = np.full((classes, dimension), 0.5)
    if dimension == 1:
        means[:, 0] = np.linspace(0.15, 0.85, classes)
    else:
        angles = 2 * np.pi * np.arange(classes) / classes
        means[:, 0] = 0.5 + radius * np.cos(angles)
        means[:, 1] = 0.5 + radius * np.sin(angles)
    feats = np.empty((classes * per_class, dimension), dtype=np.float64)
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        lo = c * per_class
        feats[lo:lo + per_class] = means[c] + rng.normal(0.0, noise, (per_class, dimension))
        labels[lo:lo + per_class] = c
    feats = np.clip(feats, 0.0, 1.0)
    images = feats.astype(np.float32).reshape(-1, 1, 1, dimension)
    return LabeledDataset(images, labels, classes, split)


# ---------------------------------------------------------------------------
# background manipulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackgroundPlan:
    """Per-class background colors plus the foreground intensity threshold."""

    colors: dict[int, tuple[float, float, float]]
    tau_fg: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tau_fg < 1.0:
            raise ValueError(f"background plan: tau_fg must be in (0, 1), got {self.tau_fg}")
        for cls, color in self.colors.items():
            if len(color) != 3 or any(not 0.0 <= v <= 1.0 for v in color):
                raise ValueError(f"background plan: bad color {color} for class {cls}")

    def groups(self) -> list[int]:
        """Group id per class; classes sharing a color share a group."""
        seen: dict[tuple, int] = {}
        out = []
        for cls in sorted(self.colors):
            key = tuple(round(v, 9) for v in self.colors[cls])
            out.append(seen.setdefault(key, len(seen)))
        return out


# Five saturated, mutually distant colors, each with a channel well below the
# default tau_fg so the foreground mask inverts the colorization exactly.
DEFAULT_PAIR_COLORS = (
    (0.90, 0.05, 0.05),   # red
    (0.05, 0.65, 0.10),   # green
    (0.05, 0.20, 0.90),   # blue
    (0.90, 0.75, 0.05),   # yellow
    (0.65, 0.05, 0.75),   # magenta
)


def default_background_plan(class_count: int = 10, tau_fg: float = 0.1) -> BackgroundPlan:
    """Adjacent class pairs {0,1}, {2,3}, ... share one of five colors."""
    colors = {
        c: DEFAULT_PAIR_COLORS[(c // 2) % len(DEFAULT_PAIR_COLORS)]
        for c in range(class_count)
    }
    return BackgroundPlan(colors=colors, tau_fg=tau_fg)


def colorize_background(ds: LabeledDataset, plan: BackgroundPlan) -> LabeledDataset:
    """Grayscale -> 3 channels: background pixels (< tau_fg) take the class
    color, foreground pixels become gray triplets (v, v, v)."""
    if ds.image_shape[0] != 1:
        raise ValueError("colorize_background: input must be single-channel")
    present = np.unique(ds.labels)
    missing = [int(c) for c in present if int(c) not in plan.colors]
    if missing:
        raise ValueError(f"colorize_background: no color for classes {missing}")
    v = ds.images[:, 0]                                   # (N, H, W)
    fg = v >= plan.tau_fg
    palette = np.zeros((ds.class_count, 3), dtype=np.float32)
    for cls, color in plan.colors.items():
        if cls < ds.class_count:
            palette[cls] = color
    bg_colors = palette[ds.labels][:, :, None, None]      # (N, 3, H, W) broadcast
    gray = np.repeat(v[:, None], 3, axis=1)
    out = np.where(fg[:, None], gray, bg_colors).astype(np.float32)
    return LabeledDataset(out, ds.labels.copy(), ds.class_count, ds.split)


def foreground_mask(image: np.ndarray, tau_fg: float) -> np.ndarray:
    """Binary (H, W) mask: 1 where min-over-channels intensity >= tau_fg.

    For grayscale this is plain intensity thresholding; for images colorized
    by `colorize_background` (class colors keep one channel below tau_fg) it
    recovers the original foreground exactly.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"foreground_mask: expected (C, H, W), got {image.shape}")
    return (image.min(axis=0) >= tau_fg).astype(np.uint8)


def replace_background_with_mask(image: np.ndarray, mask: np.ndarray, color) -> np.ndarray:
    """Set pixels where mask == 0 to `color`; keep pixels where mask == 1.

    `color` is a scalar for single-channel images or an (r, g, b) triple for
    three-channel images.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if image.ndim != 3:
        raise ValueError(f"replace_background: expected (C, H, W), got {image.shape}")
    if mask.shape != image.shape[1:]:
        raise ValueError(
            f"replace_background: mask {mask.shape} does not match image spatial "
            f"shape {image.shape[1:]}"
        )
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ValueError("replace_background: mask must be binary")
    color_arr = np.atleast_1d(np.asarray(color, dtype=np.float32))
    if color_arr.shape != (image.shape[0],):
        raise ValueError(
            f"replace_background: color has {color_arr.size} components for "
            f"{image.shape[0]}-channel image"
        )
    return np.where(mask[None].astype(bool), image, color_arr[:, None, None])


def remove_class(ds: LabeledDataset, class_id: int) -> LabeledDataset:
    """Drop every example of one class; labels and class_count stay unchanged,
    so per-class indexing remains stable for cross-run comparisons."""
    if class_id >= ds.class_count:
        raise ValueError(f"remove_class: class {class_id} outside [0, {ds.class_count})")
    return ds.subset(np.flatnonzero(ds.labels != class_id))
