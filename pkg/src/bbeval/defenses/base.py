"""Common defense interface: image in, class label or null out."""

from __future__ import annotations

import numpy as np

NULL_LABEL = -1


class Defense:
    """Base class. Subclasses implement classify_batch.

    Deterministic defenses ignore the per-call seed; randomized ones must
    use it as their only entropy source so repeated calls with the same
    seed agree exactly.
    """

    kind = "base"

    def __init__(self, num_classes: int, seed: int = 0):
        self.num_classes = num_classes
        self.seed = seed

    def classify_batch(self, images, seed=None) -> np.ndarray:
        raise NotImplementedError

    def classify(self, image, seed=None) -> int:
        arr = np.asarray(image)
        return int(self.classify_batch(arr[None], seed=seed)[0])


class VanillaDefense(Defense):
    """Bare classifier; never outputs null.

    ``preprocessor`` is an optional images -> images hook for fixed input
    transformations (e.g. a learned compression/reconstruction module);
    none is shipped.
    """

    kind = "vanilla"

    def __init__(self, model, preprocessor=None, seed: int = 0):
        super().__init__(model.num_classes, seed)
        self.model = model
        self.preprocessor = preprocessor

    def classify_batch(self, images, seed=None) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if self.preprocessor is not None:
            images = self.preprocessor(images)
        return self.model.predict_labels(images)


class StubDefense(Defense):
    """Fixed-response defense for tests and enumeration oracles."""

    kind = "stub"

    def __init__(self, responses, num_classes: int, seed: int = 0):
        super().__init__(num_classes, seed)
        self._responses = responses

    def classify_batch(self, images, seed=None) -> np.ndarray:
        images = np.asarray(images)
        if callable(self._responses):
            return np.asarray([self._responses(img) for img in images], dtype=np.int64)
        return np.full(len(images), int(self._responses), dtype=np.int64)
