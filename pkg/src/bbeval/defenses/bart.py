"""Barrage defense: per-image random transform chains in front of a model
retrained on transformed data."""

from __future__ import annotations

import numpy as np

from ..data import ImageDataset
from ..nn import Model, TrainConfig, train
from ..rng import derive_seed, generator
from .base import Defense
from .transforms import transform_catalog_apply, usable_transforms


def random_chain(channels: int, t_max: int, rng: np.random.Generator):
    """Draw T ~ uniform{0..t_max} transforms, random subset in random order."""
    pool = usable_transforms(channels)
    t = int(rng.integers(0, t_max + 1))
    t = min(t, len(pool))
    idx = rng.choice(len(pool), size=t, replace=False)
    return [pool[i] for i in idx]


def barrage_images(images: np.ndarray, t_max: int, seed: int) -> np.ndarray:
    """Independently transform each image with a seeded random chain."""
    out = np.empty_like(images)
    channels = images.shape[1]
    for i in range(len(images)):
        rng = generator(seed, "barrage", i)
        chain = random_chain(channels, t_max, rng)
        out[i] = transform_catalog_apply(images[i], chain,
                                         seed=derive_seed(seed, "chain", i))
    return out


class BartDefense(Defense):
    """Randomized transform barrage over a retrained classifier."""

    kind = "bart"

    def __init__(self, model: Model, t_max: int = 5, seed: int = 0):
        super().__init__(model.num_classes, seed)
        self.model = model
        self.t_max = t_max

    def classify_batch(self, images, seed=None) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        call_seed = self.seed if seed is None else seed
        transformed = barrage_images(images, self.t_max, call_seed)
        return self.model.predict_labels(transformed)


def fit_bart(train_data: ImageDataset, model: Model, t_max: int,
             config: TrainConfig, seed: int = 0) -> BartDefense:
    """Retrain the model from scratch on barrage-transformed training data."""
    transformed = barrage_images(train_data.images, t_max, derive_seed(seed, "train-data"))
    retrain_set = ImageDataset(transformed, train_data.labels, train_data.num_classes)
    fresh = Model(model.spec, seed=derive_seed(seed, "bart-model"))
    train(fresh, retrain_set, config)
    return BartDefense(fresh, t_max=t_max, seed=seed)
