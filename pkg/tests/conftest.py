import numpy as np
import pytest
import torch

from biuda.data import AppearanceParams, SynthConfig
from biuda.networks import NetworkConfig
from biuda.train import TrainConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(image_size=32, num_cases=4, slices_per_case=2, num_folds=2, seed=11)


@pytest.fixture
def tiny_net_config():
    return NetworkConfig(
        base_channels=4,
        content_stride=4,
        pattern_dim=4,
        num_adain_blocks=2,
        num_down_units=3,
        num_classes=5,
    )


@pytest.fixture
def tiny_train_config():
    return TrainConfig(iterations=3, batch_size=2, seed=5)
