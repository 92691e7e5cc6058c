"""Activation-swap defense: relu layers replaced by k-winner-take-all."""

from __future__ import annotations

import numpy as np

from ..data import ImageDataset
from ..nn import Model, TrainConfig, train, with_kwta
from ..rng import derive_seed
from .base import Defense


class KwtaDefense(Defense):
    """Plain classification through a sparsified-activation model."""

    kind = "kwta"

    def __init__(self, model: Model, seed: int = 0):
        super().__init__(model.num_classes, seed)
        self.model = model

    def classify_batch(self, images, seed=None) -> np.ndarray:
        return self.model.predict_labels(np.asarray(images, dtype=np.float32))


def fit_kwta(base_model: Model, train_data: ImageDataset, config: TrainConfig,
             keep: float = 0.2, seed: int = 0) -> KwtaDefense:
    """Swap activations on a copy of the trained base model, then fine-tune.

    The swapped model inherits the base weights (layer shapes are
    unchanged) and trains for config.epochs more to adapt.
    """
    spec = with_kwta(base_model.spec, keep=keep)
    model = Model(spec, seed=derive_seed(seed, "kwta-model"))
    model.load_state_dict(base_model.state_dict())
    train(model, train_data, config)
    return KwtaDefense(model, seed=seed)
