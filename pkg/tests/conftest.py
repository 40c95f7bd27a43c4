import os

import pytest

from blocksel.data import DatasetSpec, build_splits
from blocksel.model_adapter import build_blocked_model
from blocksel.trainer import TrainConfig


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "reference_scale: hours-long reproduction runs, enabled with BLOCKSEL_REFERENCE_SCALE=1",
    )


def pytest_collection_modifyitems(config, items):
    if os.getenv("BLOCKSEL_REFERENCE_SCALE") == "1":
        return

    skip = pytest.mark.skip(reason="set BLOCKSEL_REFERENCE_SCALE=1 to run")
    for item in items:
        if "reference_scale" in item.keywords:
            item.add_marker(skip)


def build_toy_spec(seed=0, samples_per_class=100):
    return DatasetSpec(
        name="synthetic",
        kind="synthetic",
        num_classes=3,
        image_size=(32, 32),
        samples_per_class=samples_per_class,
        seed=seed,
    )


@pytest.fixture(scope="session")
def toy_splits():
    return build_splits(build_toy_spec())


@pytest.fixture
def toy_factory():
    return lambda: build_blocked_model("toy", 3, pretrained=False, seed=0)


@pytest.fixture
def toy_train_config():
    return TrainConfig(
        learning_rate=5e-3,
        batch_size=16,
        epochs=5,
        block_accuracy_epochs=5,
        seed=0,
    )
