"""Dataset ingestion: synthetic class-blob images and CIFAR-10 binary batches.

Images are float64 [N, C, H, W]; labels are int64 [N]. All randomness
(subsetting, shuffling, augmentation) flows through explicit generators so a
seed fully determines the stream.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    augment: bool = False

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       self.num_classes, self.augment)


def synthetic_templates(classes: int, image_size: int, channels: int = 3) -> np.ndarray:
    """Per-class mean images: a Gaussian bump at a class-specific location
    with a class-specific channel mix, plus a faint class-keyed grating."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    center = (image_size - 1) / 2.0
    radius = image_size / 3.5
    sigma = image_size / 5.0
    templates = np.zeros((classes, channels, image_size, image_size))
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        cy = center + radius * np.sin(angle)
        cx = center + radius * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        grating = 0.25 * np.sin(2.0 * np.pi * (k + 1) * xx / image_size)
        for c in range(channels):
            mix = 0.7 + 0.5 * np.cos(2.0 * np.pi * k / classes + np.pi * c / max(channels - 1, 1))
            templates[k, c] = mix * bump + grating / (c + 1)
    return templates


def make_synthetic(classes: int, samples: int, image_size: int, seed: int,
                   channels: int = 3, noise: float = 0.25) -> Dataset:
    """Class-conditional Gaussian-blob images, exactly balanced labels.

    At noise 0 every sample equals its class template, so a nearest-template
    classifier is perfect.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    templates = synthetic_templates(classes, image_size, channels)
    labels = np.arange(samples, dtype=np.int64) % classes
    images = templates[labels].copy()
    if noise > 0:
        amp = 1.0 + noise * rng.standard_normal((samples, 1, 1, 1))
        images = images * amp + noise * rng.standard_normal(images.shape)
    order = rng.permutation(samples)
    return Dataset(images[order], labels[order], num_classes=classes, augment=False)


def _decode_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} exceeds 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _stratified_indices(labels: np.ndarray, count: int, num_classes: int,
                        rng: np.random.Generator) -> np.ndarray:
    base, extra = divmod(count, num_classes)
    chosen = []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        want = base + (1 if k < extra else 0)
        if len(idx) < want:
            raise ValueError(f"class {k} has only {len(idx)} samples, need {want}")
        chosen.append(rng.permutation(idx)[:want])
    return np.sort(np.concatenate(chosen))


def load_cifar10(directory: str, subset_size: int | None, seed: int,
                 test_subset_size: int | None = None) -> tuple[Dataset, Dataset]:
    """Decode the standard binary batches into (train, test) datasets.

    Pixels are scaled to [0,1] and standardized per channel by the selected
    training subset's statistics; the train set augments at iteration time.
    """
    train_parts = []
    for name in CIFAR_TRAIN_FILES:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
        train_parts.append(_decode_cifar_file(path))
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _decode_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))

    rng = np.random.default_rng(seed)
    if subset_size is not None and subset_size < len(labels):
        keep = _stratified_indices(labels, subset_size, 10, rng)
        images, labels = images[keep], labels[keep]
    if test_subset_size is not None and test_subset_size < len(test_labels):
        keep = _stratified_indices(test_labels, test_subset_size, 10, rng)
        test_images, test_labels = test_images[keep], test_labels[keep]

    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = np.maximum(images.std(axis=(0, 2, 3), keepdims=True), 1e-8)
    images = (images - mean) / std
    test_images = (test_images - mean) / std
    return (Dataset(images, labels, num_classes=10, augment=True),
            Dataset(test_images, test_labels, num_classes=10, augment=False))


def split_stratified(ds: Dataset, fraction: float, rng: np.random.Generator
                     ) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, per-class split: first part gets ``fraction``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0,1), got {fraction}")
    first, second = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if len(idx) < 2:
            raise ValueError(f"class {k} has {len(idx)} samples; need at least 2 to split")
        idx = rng.permutation(idx)
        cut = round(fraction * len(idx))
        cut = min(max(cut, 1), len(idx) - 1)
        first.append(idx[:cut])
        second.append(idx[cut:])
    return (ds.subset(np.sort(np.concatenate(first))),
            ds.subset(np.sort(np.concatenate(second))))


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """4-pixel reflection-pad random crop plus random horizontal flip."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        dy, dx = offsets[i]
        img = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def iter_batches(ds: Dataset, batch_size: int, rng: np.random.Generator,
                 train: bool):
    """Yield (images, labels) batches; shuffles and augments in train mode.

    A trailing batch of a single sample is dropped in train mode (batch
    statistics would be undefined).
    """
    order = rng.permutation(len(ds)) if train else np.arange(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if train and len(idx) < 2:
            continue
        x = ds.images[idx]
        if train and ds.augment:
            x = augment_batch(x, rng)
        yield np.ascontiguousarray(x), ds.labels[idx]
