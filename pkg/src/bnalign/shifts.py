"""Distribution-shift transforms and training-time augmentation.

Per-example randomness is always derived from (spec seed, example index), so
transforms are reproducible and order-independent, and can safely be
parallelized over examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError
from .layers import FLOAT

SHIFT_KINDS = (
    "none",
    "black-border",
    "gaussian-noise",
    "box-blur",
    "contrast",
    "class-subset",
    "affine-channel",
)


@dataclass(frozen=True)
class ShiftSpec:
    """Declarative description of one distribution shift.

    Only the fields relevant to ``kind`` are read: ``frac`` for black-border,
    ``sigma`` for gaussian-noise, ``radius`` for box-blur, ``scale`` for
    contrast, ``k`` for class-subset, and (``a``, ``b``, ``r``, ``noise_law``)
    for affine-channel.
    """

    kind: str = "none"
    frac: float = 0.25
    sigma: float = 0.2
    radius: int = 1
    scale: float = 0.5
    k: int = 1
    a: float = 1.0
    b: float = 0.0
    r: float = 0.0
    noise_law: str = "uniform"
    seed: int = 0

    def validate(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        if self.kind == "black-border" and not 0.0 <= self.frac <= 0.5:
            raise ConfigError(f"black-border frac must be in [0, 0.5], got {self.frac}")
        if self.kind == "gaussian-noise" and self.sigma < 0:
            raise ConfigError("gaussian-noise sigma must be >= 0")
        if self.kind == "box-blur" and self.radius < 1:
            raise ConfigError("box-blur radius must be >= 1")
        if self.kind == "class-subset" and self.k < 1:
            raise ConfigError("class-subset k must be >= 1")
        if self.kind == "affine-channel":
            if self.a <= 0:
                raise ConfigError("affine-channel requires a > 0")
            if self.r < 0:
                raise ConfigError("affine-channel requires r >= 0")
            if self.noise_law not in ("uniform", "truncated-gaussian"):
                raise ConfigError(f"unknown noise law {self.noise_law!r}")
        return self

    def describe(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "black-border":
            return f"black-border({self.frac:g})"
        if self.kind == "gaussian-noise":
            return f"gaussian-noise({self.sigma:g})"
        if self.kind == "box-blur":
            return f"box-blur({self.radius})"
        if self.kind == "contrast":
            return f"contrast({self.scale:g})"
        if self.kind == "class-subset":
            return f"class-subset({self.k})"
        if self.kind == "affine-channel":
            return f"affine-channel(a={self.a:g},b={self.b:g},r={self.r:g})"
        return self.kind


def shift_from_dict(d: dict) -> ShiftSpec:
    unknown = set(d) - set(ShiftSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown shift fields: {sorted(unknown)}")
    return ShiftSpec(**d).validate()


def _example_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _truncated_noise(rng, law, r, size):
    if r == 0.0:
        return np.zeros(size, dtype=FLOAT)
    if law == "uniform":
        return rng.uniform(-r, r, size=size)
    # truncated N(0, (r/2)^2), rejection-sampled to the exact bounded law
    s = r / 2.0
    out = rng.normal(0.0, s, size=size)
    bad = np.abs(out) > r
    while np.any(bad):
        out[bad] = rng.normal(0.0, s, size=int(bad.sum()))
        bad = np.abs(out) > r
    return out


def apply_shift(dataset: LabeledDataset, spec: ShiftSpec) -> LabeledDataset:
    """Apply one shift; labels are never altered (class-subset only filters)."""
    spec.validate()
    images = dataset.images
    labels = dataset.labels

    if spec.kind == "none":
        return LabeledDataset(images.copy(), labels.copy(), dataset.n_classes, dataset.class_subset)

    if spec.kind == "class-subset":
        if spec.k > dataset.n_classes:
            raise ConfigError(f"class-subset k={spec.k} exceeds class count {dataset.n_classes}")
        keep = labels < spec.k
        if not np.any(keep):
            raise ConfigError("class-subset produced an empty dataset")
        subset = spec.k < dataset.n_classes or dataset.class_subset
        return LabeledDataset(images[keep].copy(), labels[keep].copy(), dataset.n_classes, subset)

    out = images.copy()
    n, _, h, w = images.shape
    if spec.kind == "black-border":
        width = int(round(spec.frac * h))
        if width > 0:
            out[:, :, :width, :] = 0.0
            out[:, :, h - width :, :] = 0.0
            out[:, :, :, :width] = 0.0
            out[:, :, :, w - width :] = 0.0
    elif spec.kind == "gaussian-noise":
        for i in range(n):
            noise = _example_rng(spec.seed, i).normal(0.0, spec.sigma, size=images.shape[1:])
            out[i] = np.clip(images[i] + noise, 0.0, 1.0)
    elif spec.kind == "box-blur":
        out = _box_blur(images, spec.radius)
    elif spec.kind == "contrast":
        means = images.mean(axis=(1, 2, 3), keepdims=True)
        out = np.clip(means + spec.scale * (images - means), 0.0, 1.0)
    elif spec.kind == "affine-channel":
        for i in range(n):
            eps = _truncated_noise(_example_rng(spec.seed, i), spec.noise_law, spec.r, images.shape[1:])
            out[i] = spec.a * images[i] + spec.b + eps
    else:
        raise ConfigError(f"unhandled shift kind {spec.kind!r}")
    return LabeledDataset(out, labels.copy(), dataset.n_classes, dataset.class_subset)


def apply_shifts(dataset: LabeledDataset, specs) -> LabeledDataset:
    for spec in specs:
        dataset = apply_shift(dataset, spec)
    return dataset


def _box_blur(images, radius):
    """Separable box filter with edge-replicate padding."""
    k = 2 * radius + 1
    padded = np.pad(images, ((0, 0), (0, 0), (radius, radius), (0, 0)), mode="edge")
    rows = np.add.reduce([padded[:, :, i : i + images.shape[2], :] for i in range(k)]) / k
    padded = np.pad(rows, ((0, 0), (0, 0), (0, 0), (radius, radius)), mode="edge")
    return np.add.reduce([padded[:, :, :, i : i + images.shape[3]] for i in range(k)]) / k


@dataclass(frozen=True)
class AugmentationPolicy:
    """Random crop with zero padding plus horizontal flips, as used in training."""

    pad: int = 2
    flip_prob: float = 0.5
    enabled: bool = True

    def validate(self):
        if self.pad < 0:
            raise ConfigError("augmentation pad must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip probability must be in [0, 1]")
        return self

    def describe(self) -> str:
        if not self.enabled:
            return "off"
        return f"crop-pad{self.pad}+flip{self.flip_prob:g}"


def augment(images: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    """Independently zero-pad/crop and flip each image; labels untouched."""
    policy.validate()
    if not policy.enabled:
        return images.copy()
    n, c, h, w = images.shape
    pad = policy.pad
    if pad >= min(h, w):
        raise ConfigError(f"augmentation pad {pad} must be smaller than the image side {min(h, w)}")
    out = np.empty_like(images)
    if pad > 0:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=FLOAT)
        padded[:, :, pad : pad + h, pad : pad + w] = images
        for i in range(n):
            oy, ox = offsets[i]
            out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    else:
        out[:] = images
    if policy.flip_prob > 0:
        flips = rng.random(n) < policy.flip_prob
        out[flips] = out[flips][:, :, :, ::-1]
    return out
