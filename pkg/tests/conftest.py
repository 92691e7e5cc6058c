"""Shared fixtures: a small trained desk model and datasets, built once."""

from __future__ import annotations

import numpy as np
import pytest

from bbeval import data, nn

DESK_SHAPE = (1, 12, 12)
DESK_CLASSES = 10


@pytest.fixture(scope="session")
def desk_train():
    return data.synth_dataset(1200, DESK_CLASSES, shape=DESK_SHAPE, seed=11)


@pytest.fixture(scope="session")
def desk_test():
    return data.synth_dataset(400, DESK_CLASSES, shape=DESK_SHAPE, seed=22)


@pytest.fixture(scope="session")
def desk_model(desk_train):
    model = nn.Model(nn.desk_defended_spec(DESK_SHAPE, DESK_CLASSES), seed=5)
    nn.train(model, desk_train, nn.TrainConfig(epochs=6, seed=7))
    return model


@pytest.fixture(scope="session")
def desk_clean_accuracy(desk_model, desk_test):
    return float(np.mean(desk_model.predict_labels(desk_test.images) == desk_test.labels))


@pytest.fixture(scope="session")
def tiny_train():
    return data.synth_dataset(300, 4, shape=DESK_SHAPE, seed=31)


@pytest.fixture(scope="session")
def tiny_test():
    return data.synth_dataset(120, 4, shape=DESK_SHAPE, seed=32)


@pytest.fixture(scope="session")
def tiny_model(tiny_train):
    model = nn.Model(nn.desk_defended_spec(DESK_SHAPE, 4), seed=9)
    nn.train(model, tiny_train, nn.TrainConfig(epochs=4, seed=3))
    return model
