"""Dataset loading, normalization, subsetting, and a synthetic fallback.

Two binary formats are supported bit-exactly: the IDX format used by the
MNIST family and the CIFAR-10 binary batch format. Pixels are mapped from
[0, 255] bytes to floats in [-0.5, 0.5] via v = byte/255 - 0.5.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, ParameterError, UsageError
from .rng import generator

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
VALUE_RANGE = (-0.5, 0.5)


@dataclass
class ImageDataset:
    """Images as float32 (N, C, H, W) in [-0.5, 0.5] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    value_range: tuple = VALUE_RANGE

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"dataset: {len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def take(self, indices) -> "ImageDataset":
        idx = np.asarray(indices)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, n_first: int):
        return self.take(np.arange(n_first)), self.take(np.arange(n_first, len(self)))


def _bytes_to_float(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0) - 0.5


def _float_to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((values + 0.5) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# IDX format

def load_idx(images_path, labels_path) -> ImageDataset:
    with open(images_path, "rb") as fh:
        img_blob = fh.read()
    with open(labels_path, "rb") as fh:
        lab_blob = fh.read()

    if len(img_blob) == 0:
        raise FormatError(f"idx: empty image file {images_path}", offset=0)
    if len(img_blob) < 16:
        raise FormatError("idx: image header truncated, need 16 bytes "
                          f"got {len(img_blob)}", offset=len(img_blob))
    magic, n, h, w = struct.unpack(">IIII", img_blob[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"idx: bad image magic 0x{magic:08x}, "
                          f"expected 0x{IDX_IMAGE_MAGIC:08x}", offset=0)
    expected = n * h * w
    actual = len(img_blob) - 16
    if actual != expected:
        raise FormatError(f"idx: image payload holds {actual} bytes, "
                          f"expected {expected}", offset=16 + min(actual, expected))

    if len(lab_blob) == 0:
        raise FormatError(f"idx: empty label file {labels_path}", offset=0)
    if len(lab_blob) < 8:
        raise FormatError("idx: label header truncated", offset=len(lab_blob))
    lmagic, ln = struct.unpack(">II", lab_blob[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"idx: bad label magic 0x{lmagic:08x}, "
                          f"expected 0x{IDX_LABEL_MAGIC:08x}", offset=0)
    if len(lab_blob) - 8 != ln:
        raise FormatError(f"idx: label payload holds {len(lab_blob) - 8} bytes, "
                          f"expected {ln}", offset=8 + min(len(lab_blob) - 8, ln))
    if ln != n:
        raise FormatError(f"idx: {n} images but {ln} labels", offset=4)

    raw = np.frombuffer(img_blob, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=8).astype(np.int64)
    k = int(labels.max()) + 1 if n else 0
    return ImageDataset(_bytes_to_float(raw), labels, num_classes=k)


def save_idx(dataset: ImageDataset, images_path, labels_path):
    """Serializer counterpart of load_idx (single-channel datasets)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise UsageError("save_idx: IDX images are single-channel")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(_float_to_bytes(dataset.images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary format

def load_cifar_bin(paths) -> ImageDataset:
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) == 0:
            raise FormatError(f"cifar: empty file {path}", offset=0)
        if len(blob) % CIFAR_RECORD_BYTES:
            raise FormatError(
                f"cifar: {path} length {len(blob)} is not a multiple of "
                f"{CIFAR_RECORD_BYTES}; partial record starts",
                offset=(len(blob) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES)
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        label_chunks.append(rec[:, 0].astype(np.int64))
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(chunks)
    labels = np.concatenate(label_chunks)
    k = int(labels.max()) + 1 if len(labels) else 0
    return ImageDataset(_bytes_to_float(images), labels, num_classes=k)


def save_cifar_bin(dataset: ImageDataset, path):
    if dataset.images.shape[1:] != (3, 32, 32):
        raise UsageError("save_cifar_bin: images must be (3, 32, 32)")
    raw = _float_to_bytes(dataset.images).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], raw], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# subsetting

def subset_count(dataset: ImageDataset, count: int, seed: int) -> ImageDataset:
    """Stratified draw of ``count`` samples without replacement.

    Each class contributes floor(count * n_c / N); leftover slots go to the
    classes with the largest fractional remainders (seeded tie order).
    Selected indices stay in original order.
    """
    n = len(dataset)
    if not 0 < count <= n:
        raise ParameterError(f"subset_count: count {count} out of range (0, {n}]")
    if count == n:
        return dataset.take(np.arange(n))
    rng = generator(seed, "subset")
    labels = dataset.labels
    classes = np.unique(labels)
    quota = {}
    remainders = []
    for c in classes:
        exact = count * np.sum(labels == c) / n
        quota[c] = int(exact)
        remainders.append((c, exact - int(exact)))
    short = count - sum(quota.values())
    order = rng.permutation(len(remainders))
    ranked = sorted((remainders[i] for i in order), key=lambda it: -it[1])
    for c, _ in ranked[:short]:
        quota[c] += 1
    chosen = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        take = min(quota[c], len(pool))
        chosen.append(rng.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(chosen))[:count]
    return dataset.take(idx)


def subset_fraction(dataset: ImageDataset, fraction: float, seed: int) -> ImageDataset:
    """Seeded stratified subset of floor(fraction * N) samples."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"subset_fraction: fraction {fraction} out of range (0, 1]")
    if fraction == 1.0:
        return dataset.take(np.arange(len(dataset)))
    return subset_count(dataset, int(fraction * len(dataset)), seed)


# ---------------------------------------------------------------------------
# synthetic fallback

def _class_patterns(k: int, shape, pattern_seed: int, amplitude: float) -> np.ndarray:
    """Fixed per-class stripe + blob templates, independent of sample seed.

    Classes share a common background and differ by ``amplitude``-scaled
    stripes and blobs; smaller amplitudes push class boundaries closer
    together, which makes adversarial perturbations (and their transfer
    between models) behave like they do on natural image data.
    """
    c, h, w = shape
    rng = generator(pattern_seed, "synth-patterns", k, tuple(shape))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    ys, xs = ys / max(h - 1, 1), xs / max(w - 1, 1)
    common = 0.20 * np.sin(2 * np.pi * (xs + ys)) * amplitude
    out = np.empty((k, c, h, w), dtype=np.float32)
    for cls in range(k):
        theta = np.pi * cls / k
        freq = 2.0 + (cls % 3)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        blob = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / 0.02))
        base = common + amplitude * (0.28 * stripes + 0.30 * blob * rng.choice([-1.0, 1.0]))
        for ch in range(c):
            gain = 1.0 if c == 1 else rng.uniform(0.6, 1.0)
            out[cls, ch] = np.clip(gain * base, -0.45, 0.45)
    return out


def synth_dataset(n: int, k: int, shape=(1, 12, 12), seed: int = 0,
                  noise: float = 0.1, pattern_seed: int = 0,
                  amplitude: float = 0.5) -> ImageDataset:
    """Class-conditional pattern dataset, separable by construction.

    Classes are balanced to within one sample. The per-class templates
    depend only on (k, shape, pattern_seed, amplitude), so train and test
    splits drawn with different seeds share the same class structure.
    """
    if n < k:
        raise ParameterError(f"synth_dataset: need at least one sample per class ({n} < {k})")
    patterns = _class_patterns(k, shape, pattern_seed, amplitude)
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    labels = np.repeat(np.arange(k), counts)
    rng = generator(seed, "synth-noise")
    order = rng.permutation(n)
    labels = labels[order]
    images = patterns[labels]
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape).astype(np.float32)
    images = np.clip(images, VALUE_RANGE[0], VALUE_RANGE[1]).astype(np.float32)
    return ImageDataset(images, labels.astype(np.int64), num_classes=k)
