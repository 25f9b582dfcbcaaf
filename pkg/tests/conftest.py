import numpy as np
import pytest

from geot.cloudgen import write_dataset
from geot.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Six 48-point training arches (half labelled) and two test arches."""
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root, n_clouds=6, n_points=48, n_classes=4, labeled_ratio=0.5, seed=3, n_test=2)
    return root


@pytest.fixture
def tiny_cfg(tiny_data):
    return TrainConfig(data=str(tiny_data), epochs=2, steps_per_epoch=2, width=8, k_feat=4, k1=3, k2=3, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
