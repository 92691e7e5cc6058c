"""Distribution-classifier defense over random resize-pad variants.

Each input is resized to a random side within a range and zero-padded back
at a random position, many times; the classifier's softmax outputs over
those variants are summarized per class by a Gaussian kernel density over
discretization bins, and a small dense network classifies the resulting
distribution features.
"""

from __future__ import annotations

import numpy as np

from ..data import ImageDataset
from ..exceptions import ParameterError
from ..nn import LayerSpec, Model, ModelSpec, TrainConfig, train
from ..rng import derive_seed, generator
from .base import Defense
from .transforms import _resize_nearest

KDE_BINS = 100
KDE_WIDTH = 0.05
NSAMP_RGB = 50
NSAMP_GRAY = 100


def default_nsamp(channels: int) -> int:
    """Sampling counts mirroring the reference setups: 50 for three-channel
    data, 100 for grayscale."""
    return NSAMP_RGB if channels == 3 else NSAMP_GRAY


def random_resize_pad(image: np.ndarray, resize_range, rng: np.random.Generator
                      ) -> np.ndarray:
    """Resize to a random side within the range, zero-pad back at a random
    offset (zero is mid-gray in the normalized domain)."""
    c, h, w = image.shape
    lo, hi = resize_range
    if not 1 <= lo <= hi <= min(h, w):
        raise ParameterError(f"resize range {resize_range} out of [1, {min(h, w)}]")
    side = int(rng.integers(lo, hi + 1))
    small = _resize_nearest(image, side, side)
    out = np.zeros_like(image)
    dy = int(rng.integers(0, h - side + 1))
    dx = int(rng.integers(0, w - side + 1))
    out[:, dy:dy + side, dx:dx + side] = small
    return out


def kde_features(score_vectors: np.ndarray, bins: int = KDE_BINS,
                 width: float = KDE_WIDTH) -> np.ndarray:
    """Per-class marginal densities of the softmax samples.

    Rows (one per class) are nonnegative and sum to one over the bins.
    """
    scores = np.asarray(score_vectors, dtype=np.float64)
    centers = (np.arange(bins) + 0.5) / bins
    diff = centers[None, None, :] - scores[:, :, None]       # (n, K, bins)
    dens = np.exp(-0.5 * (diff / width) ** 2).sum(axis=0).astype(np.float64)
    dens /= dens.sum(axis=1, keepdims=True)
    return dens


def feature_classifier_spec(num_classes: int, bins: int = KDE_BINS) -> ModelSpec:
    layers = [LayerSpec("dense", width=32), LayerSpec("relu"),
              LayerSpec("dense", width=num_classes)]
    return ModelSpec(layers, num_classes, (num_classes * bins,))


class DistcDefense(Defense):
    """Random resize-pad sampling plus a classifier over softmax densities."""

    kind = "distc"

    def __init__(self, model, feature_model, resize_range, nsamp: int = 50,
                 bins: int = KDE_BINS, width: float = KDE_WIDTH, seed: int = 0):
        super().__init__(model.num_classes, seed)
        self.model = model
        self.feature_model = feature_model
        self.resize_range = tuple(resize_range)
        self.nsamp = nsamp
        self.bins = bins
        self.width = width

    def features(self, image: np.ndarray, seed: int) -> np.ndarray:
        rng = generator(seed, "distc")
        variants = np.stack([random_resize_pad(image, self.resize_range, rng)
                             for _ in range(self.nsamp)])
        scores = self.model.scores(variants)
        return kde_features(scores, self.bins, self.width).reshape(-1)

    def classify_batch(self, images, seed=None) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        call_seed = self.seed if seed is None else seed
        feats = np.stack([self.features(images[i], derive_seed(call_seed, "sample", i))
                          for i in range(len(images))]).astype(np.float32)
        return self.feature_model.predict_labels(feats)


def fit_distc(model, train_data: ImageDataset, resize_range, nsamp: int,
              config: TrainConfig, seed: int = 0, bins: int = KDE_BINS,
              width: float = KDE_WIDTH) -> DistcDefense:
    """Collect distribution features for correctly classified training
    images and fit the dense feature classifier on them."""
    predicted = model.predict_labels(train_data.images)
    keep = predicted == train_data.labels
    images = train_data.images[keep]
    labels = train_data.labels[keep]
    defense = DistcDefense(model, None, resize_range, nsamp, bins, width, seed=seed)
    feats = np.stack([defense.features(images[i], derive_seed(seed, "fit", i))
                      for i in range(len(images))]).astype(np.float32)
    feature_model = Model(feature_classifier_spec(model.num_classes, bins),
                          seed=derive_seed(seed, "feature-model"))
    feature_set = ImageDataset(feats, labels, model.num_classes)
    train(feature_model, feature_set, config)
    defense.feature_model = feature_model
    return defense
