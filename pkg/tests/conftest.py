"""
Shared fixtures: a tiny rendered dataset and a fast training config.
"""
import os

import numpy as np
import pytest

from synthscene import DatasetConfig, make_dataset
from train_config import TrainConfig


def pytest_collection_modifyitems(config, items):
    if os.getenv("NIGHTDEPTH_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set NIGHTDEPTH_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("NIGHTDEPTH_") and key != "NIGHTDEPTH_RUN_SLOW":
            monkeypatch.delenv(key)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    cfg = DatasetConfig(num_triplets=6, num_day_triplets=4, height=32, width=32, seed=3)
    return make_dataset(cfg, root, progress=False)


@pytest.fixture
def fast_config():
    return TrainConfig(height=32, width=32, epochs=1, batch_size=2, seed=0, max_iterations_per_epoch=2,
                       warmup_iters=4, progress=False, val_fraction=0.34).validate()
