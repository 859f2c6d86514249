import numpy as np
import pytest
import torch

from fxchain.audio import AudioBuffer, gen_test_signal

SR = 44100


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise():
    return gen_test_signal("white-noise", 1.0, seed=7, sample_rate=SR)


@pytest.fixture
def short_noise():
    return gen_test_signal("white-noise", 0.25, seed=3, sample_rate=SR)


def tensor(x):
    if isinstance(x, AudioBuffer):
        x = x.samples
    return torch.tensor(np.array(x), dtype=torch.float64)
