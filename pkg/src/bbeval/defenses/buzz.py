"""Unanimous-vote ensemble defense with fixed secret input transforms.

Each member applies its own transform (a resize round-trip plus a fixed
additive mask, both frozen at construction) and classifies with a model
retrained on transformed data. The members must agree unanimously on a
label; any disagreement yields the null label.
"""

from __future__ import annotations

import numpy as np

from ..data import ImageDataset, VALUE_RANGE
from ..nn import Model, TrainConfig, train
from ..rng import derive_seed, generator
from .base import NULL_LABEL, Defense
from .transforms import _resize_nearest


class SecretTransform:
    """Per-member fixed transform: resize to a secret side and back, then
    add a secret mask."""

    def __init__(self, shape, resize_side: int, mask: np.ndarray):
        self.shape = tuple(shape)
        self.resize_side = resize_side
        self.mask = mask.astype(np.float32)

    @classmethod
    def create(cls, shape, member_index: int, seed: int,
               mask_amplitude: float = 0.1) -> "SecretTransform":
        c, h, w = shape
        rng = generator(seed, "secret-transform", member_index)
        offsets = [-2, 2, -4, 4, -1, 1, -3, 3]
        side = max(4, h + offsets[member_index % len(offsets)])
        mask = rng.uniform(-mask_amplitude, mask_amplitude, size=shape)
        return cls(shape, side, mask)

    def apply(self, images: np.ndarray) -> np.ndarray:
        c, h, w = self.shape
        out = np.empty_like(images)
        for i in range(len(images)):
            small = _resize_nearest(images[i], self.resize_side, self.resize_side)
            out[i] = _resize_nearest(small, h, w)
        out = out + self.mask
        return np.clip(out, VALUE_RANGE[0], VALUE_RANGE[1]).astype(np.float32)


class BuzzMember:
    def __init__(self, transform: SecretTransform, model):
        self.transform = transform
        self.model = model

    def classify_batch(self, images: np.ndarray) -> np.ndarray:
        return self.model.predict_labels(self.transform.apply(images))


class BuzzDefense(Defense):
    """Label if all members agree, null otherwise."""

    kind = "buzz"

    def __init__(self, members, num_classes: int, seed: int = 0):
        super().__init__(num_classes, seed)
        self.members = list(members)

    def classify_batch(self, images, seed=None) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        votes = np.stack([m.classify_batch(images) for m in self.members])
        first = votes[0]
        unanimous = np.all(votes == first[None, :], axis=0)
        return np.where(unanimous, first, NULL_LABEL).astype(np.int64)


def unanimous_or_null(member_labels) -> int:
    """Decision rule on a tuple of member labels; reference for enumeration."""
    labels = list(member_labels)
    return int(labels[0]) if all(l == labels[0] for l in labels) else NULL_LABEL


def fit_buzz(train_data: ImageDataset, model: Model, p: int,
             config: TrainConfig, seed: int = 0) -> BuzzDefense:
    """Train p members, each on its own secretly transformed training set."""
    members = []
    for m in range(p):
        transform = SecretTransform.create(train_data.shape, m, seed)
        transformed = transform.apply(train_data.images)
        member_set = ImageDataset(transformed, train_data.labels, train_data.num_classes)
        member_model = Model(model.spec, seed=derive_seed(seed, "buzz-member", m))
        train(member_model, member_set, config)
        members.append(BuzzMember(transform, member_model))
    return BuzzDefense(members, train_data.num_classes, seed=seed)
