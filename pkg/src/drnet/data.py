"""Datasets: CIFAR-10 binary reader/writer, a seeded synthetic benchmark, augmentation."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptRecordError, DataError, DataFormatError

RECORD_BYTES = 3073
IMAGE_BYTES = 3072


@dataclass
class Dataset:
    """Images (N, 3, H, W) float32 in [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx], meta=dict(self.meta))

    def with_stats(self, mean, std) -> "Dataset":
        return replace(self, mean=np.asarray(mean, np.float32), std=np.asarray(std, np.float32))

    def normalized(self) -> np.ndarray:
        if self.mean is None:
            raise DataError("normalisation statistics not set")
        return normalize(self.images, self.mean, self.std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)).astype(np.float32), x.std(axis=(0, 2, 3)).astype(np.float32)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return ((x - mean) / std).astype(np.float32)


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (x * std + mean).astype(np.float32)


# -- CIFAR-10 binary ----------------------------------------------------------------

def read_cifar10_bytes(raw: bytes, record_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD_BYTES:
        raise DataFormatError(f"size {len(raw)} is not a multiple of {RECORD_BYTES}",
                              offset=(len(raw) // RECORD_BYTES) * RECORD_BYTES)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptRecordError(f"label byte {labels[bad[0]]} > 9", record=record_offset + int(bad[0]))
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar10_binary(paths: Sequence) -> Dataset:
    """Read whole-record CIFAR-10 binary batches, preserving record order."""
    pix, labs = [], []
    count = 0
    for p in paths:
        try:
            raw = Path(p).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from exc
        try:
            x, y = read_cifar10_bytes(raw, count)
        except DataFormatError as exc:
            raise DataFormatError(f"{p}: {exc}", offset=exc.offset) from None
        pix.append(x)
        labs.append(y)
        count += len(y)
    pixels = np.concatenate(pix) if pix else np.zeros((0, 3, 32, 32), np.uint8)
    labels = np.concatenate(labs) if labs else np.zeros(0, np.int64)
    images = pixels.astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, 10, meta={"source": [str(p) for p in paths]})


def cifar10_bytes(dataset: Dataset) -> bytes:
    pixels = np.rint(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    rec = np.empty((len(dataset), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = dataset.labels.astype(np.uint8)
    rec[:, 1:] = pixels.reshape(len(dataset), IMAGE_BYTES)
    return rec.tobytes()


def write_cifar10_binary(dataset: Dataset, path) -> None:
    Path(path).write_bytes(cifar10_bytes(dataset))


# -- synthetic benchmark -----------------------------------------------------------

def make_synthetic(num_classes: int = 10, per_class: int = 500, size=(32, 32), seed: int = 0) -> Dataset:
    """Class-conditioned coloured blobs with positional jitter, contrast and noise variation.

    Recipe (all draws from ``numpy.random.default_rng(seed)``):
    class c gets the fully saturated colour of hue c / num_classes (HSV to
    RGB, value 1), a centre in the middle half of the image and a radius in
    [4, 7] px (scaled for non-32 px sizes).  Each instance then draws a centre
    jitter of up to +-4 px, a radius scale in [0.75, 1.25], a contrast in
    [0.35, 1], a per-channel background level in [0, 0.3], Gaussian pixel
    noise with sigma in [0.02, 0.15], and with probability 1/2 a faint
    distractor blob in another class's colour.  Label = index mod num_classes.
    """
    if num_classes < 1 or per_class < 1 or min(size) < 1:
        raise DataError("num_classes, per_class and size must be positive")
    h, w = size
    rng = np.random.default_rng(seed)
    colours = np.array([colorsys.hsv_to_rgb(c / num_classes, 1.0, 1.0) for c in range(num_classes)])
    centres = np.stack([rng.uniform(h * 0.25, h * 0.75, num_classes),
                        rng.uniform(w * 0.25, w * 0.75, num_classes)], axis=1)
    radii = rng.uniform(4.0, 7.0, num_classes) * min(h, w) / 32.0

    n = num_classes * per_class
    labels = np.arange(n) % num_classes
    jitter = rng.uniform(-4, 4, (n, 2)) * np.array([h, w]) / 32.0
    scale = rng.uniform(0.75, 1.25, n)
    contrast = rng.uniform(0.35, 1.0, n)
    background = rng.uniform(0.0, 0.3, (n, 3))
    sigma = rng.uniform(0.02, 0.15, n)
    has_distractor = rng.random(n) < 0.5
    other = (labels + rng.integers(1, max(num_classes, 2), n)) % num_classes
    d_pos = np.stack([rng.uniform(0, h, n), rng.uniform(0, w, n)], axis=1)
    noise = rng.standard_normal((n, 3, h, w))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, 3, h, w), dtype=np.float32)
    for i in range(n):
        c = labels[i]
        cy, cx = centres[c] + jitter[i]
        r = radii[c] * scale[i]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = background[i][:, None, None] + contrast[i] * blob[None] * colours[c][:, None, None]
        if has_distractor[i]:
            o = other[i]
            rd = radii[o] * 0.6
            dblob = np.exp(-((yy - d_pos[i, 0]) ** 2 + (xx - d_pos[i, 1]) ** 2) / (2 * rd * rd))
            img = img + 0.3 * contrast[i] * dblob[None] * colours[o][:, None, None]
        img = img + sigma[i] * noise[i]
        images[i] = np.clip(img, 0.0, 1.0)
    meta = {"source": "synthetic", "seed": seed, "num_classes": num_classes, "per_class": per_class,
            "size": [h, w]}
    return Dataset(images, labels, num_classes, meta=meta)


def split_validation(dataset: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded hold-out; normalisation statistics come from the remaining training part."""
    if not 0 <= fraction < 1:
        raise DataError(f"validation fraction must be in [0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * fraction))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train = dataset.subset(train_idx)
    mean, std = channel_stats(train.images)
    return train.with_stats(mean, std), dataset.subset(val_idx).with_stats(mean, std)


# -- augmentation --------------------------------------------------------------

def hflip(batch: np.ndarray, mask) -> np.ndarray:
    out = batch.copy()
    mask = np.asarray(mask, dtype=bool)
    out[mask] = out[mask][..., ::-1]
    return out


def random_crop(batch: np.ndarray, offsets: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` and cut the original extent at per-instance (top, left) offsets."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i, (t, l) in enumerate(offsets):
        out[i] = padded[i, :, t:t + h, l:l + w]
    return out


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    flip: bool = True
    crop: bool = True


def augment(batch: np.ndarray, rng: Optional[np.random.Generator], mean, std, train: bool = True,
            config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random crop + horizontal flip (train only), then per-channel normalisation."""
    x = batch
    if train:
        n = len(batch)
        if config.crop:
            x = random_crop(x, rng.integers(0, 2 * config.pad + 1, (n, 2)), config.pad)
        if config.flip:
            x = hflip(x, rng.random(n) < 0.5)
    return normalize(x, mean, std)
