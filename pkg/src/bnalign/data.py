"""Procedural shape images and IDX file loading.

The shapes dataset is a hermetic stand-in for small natural-image corpora:
one of up to ten geometric glyphs drawn at a random position, size, and
brightness over a noisy textured background.  Values live in [0, 1], layout
NCHW with a single channel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IdxParseError
from .layers import FLOAT

# ordered so that any prefix (class-subset experiments use the first k) is a
# mutually well-separated set: filled blob, thin plus, wedge, hollow blob, ...
SHAPE_NAMES = (
    "disk",
    "cross",
    "triangle",
    "ring",
    "square",
    "diamond",
    "x-cross",
    "hbars",
    "vbars",
    "frame",
)


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, n_classes)
    n_classes: int
    class_subset: bool = False  # set when classes were deliberately dropped

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=FLOAT)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be NCHW, got ndim={self.images.ndim}")
        if len(self.labels) != len(self.images):
            raise ConfigError("images and labels disagree on example count")
        if len(self.images) < 1:
            raise ConfigError("dataset must contain at least one example")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ConfigError("labels out of range")
        if not self.class_subset:
            present = np.unique(self.labels)
            if len(present) != self.n_classes:
                raise ConfigError("every class must be present unless the dataset is an explicit class subset")

    def __len__(self):
        return len(self.images)


def _draw_shape(mask_name, yy, xx, cy, cx, s):
    dy = yy - cy
    dx = xx - cx
    if mask_name == "square":
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if mask_name == "disk":
        return dy * dy + dx * dx <= s * s
    if mask_name == "cross":
        t = max(1.0, s / 3.0)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= s)) | ((np.abs(dx) <= t) & (np.abs(dy) <= s))
    if mask_name == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    if mask_name == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= s * s) & (d2 >= (0.55 * s) ** 2)
    if mask_name == "diamond":
        return np.abs(dy) + np.abs(dx) <= s
    if mask_name == "x-cross":
        t = max(1.0, s / 3.0)
        inside = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        return inside & ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t))
    if mask_name == "hbars":
        t = max(1.0, s / 3.0)
        inside = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        return inside & ((np.abs(dy + 0.6 * s) <= t / 2) | (np.abs(dy - 0.6 * s) <= t / 2) | (np.abs(dy) <= t / 2))
    if mask_name == "vbars":
        t = max(1.0, s / 3.0)
        inside = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        return inside & ((np.abs(dx + 0.6 * s) <= t / 2) | (np.abs(dx - 0.6 * s) <= t / 2) | (np.abs(dx) <= t / 2))
    if mask_name == "frame":
        t = max(1.0, s / 3.0)
        outer = (np.abs(dy) <= s) & (np.abs(dx) <= s)
        inner = (np.abs(dy) <= s - t) & (np.abs(dx) <= s - t)
        return outer & ~inner
    raise ConfigError(f"unknown shape {mask_name!r}")


def generate_shapes_dataset(n_per_class, classes, image_size=16, seed=0) -> LabeledDataset:
    """Render a class-balanced shapes dataset, bit-deterministic per seed.

    Every example gets its own PRNG stream derived from (seed, example index),
    so the content of example i does not depend on how many examples exist.
    """
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ConfigError(f"classes must be in 2..{len(SHAPE_NAMES)}, got {classes}")
    if image_size < 12:
        raise ConfigError(f"shapes need image_size >= 12 to fit, got {image_size}")
    n = n_per_class * classes
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(FLOAT)
    images = np.empty((n, 1, image_size, image_size), dtype=FLOAT)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % classes
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        # mid-bright textured background: far from zero, so black borders and
        # zero-padded crops are genuine out-of-distribution pixels
        base = rng.uniform(0.30, 0.55)
        img = base + rng.uniform(-0.06, 0.06, size=(image_size, image_size))
        s = rng.uniform(0.16, 0.22) * image_size
        margin = s + 1.0
        cy = rng.uniform(margin, image_size - 1 - margin)
        cx = rng.uniform(margin, image_size - 1 - margin)
        fg = rng.uniform(0.72, 1.0)
        mask = _draw_shape(SHAPE_NAMES[label], yy, xx, cy, cx, s)
        img = np.where(mask, fg + rng.uniform(-0.03, 0.03, size=img.shape), img)
        # faint sensor noise, part of the data distribution itself (present in
        # both train and eval splits, so not a shift)
        img = img + rng.normal(0.0, 0.02, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return LabeledDataset(images, labels, classes)


# -- IDX format -------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8}


def read_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file (unsigned-byte payloads only)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxParseError(f"file truncated: {len(raw)} bytes, need at least 4 for the magic at offset 0")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0:
        raise IdxParseError(f"bad magic at offset 0: first two bytes must be zero, got 0x{raw[0]:02x}{raw[1]:02x}")
    if dtype_code not in _IDX_DTYPES:
        raise IdxParseError(f"unsupported dtype code 0x{dtype_code:02x} at offset 2 (only 0x08 u8 supported)")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxParseError(f"file truncated: {len(raw)} bytes, need {header_len} for {ndim} dimension fields")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64)) if ndim else 0
    got = len(raw) - header_len
    if got != expected:
        raise IdxParseError(
            f"payload length mismatch at offset {header_len}: header declares {expected} bytes, file carries {got}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims).copy()


def write_idx(path, array):
    array = np.ascontiguousarray(array)
    if array.dtype != np.uint8:
        raise ConfigError(f"IDX writer only supports u8 payloads, got {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, n_classes=None) -> LabeledDataset:
    """Load an IDX image/label file pair into a dataset scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise IdxParseError(f"image file must be 3-D or 4-D, got {images.ndim}-D")
    if labels.ndim != 1:
        raise IdxParseError(f"label file must be 1-D, got {labels.ndim}-D")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return LabeledDataset(images.astype(FLOAT) / 255.0, labels.astype(np.int64), n_classes)
