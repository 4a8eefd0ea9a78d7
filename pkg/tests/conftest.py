import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(2024)
