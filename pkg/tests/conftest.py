import numpy as np
import pytest
import torch

from concept_lens.backend import ToyBackend


@pytest.fixture(scope="session")
def toy():
    return ToyBackend()


@pytest.fixture(scope="session")
def tiny():
    """8-pixel, 2-pixel-patch toy for finite-difference checks."""
    return ToyBackend(seed=3, hidden_dim=16, layer_count=2, image_resolution=8, patch_size=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    torch.set_num_threads(1)
