import numpy as np
import pytest

from geomstream import model as M


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides) -> M.ModelConfig:
    """Small but structurally complete model configuration for fast tests."""
    base = dict(layers=2, width=16, heads=2, ffn_width=16, kernels=8, seed=0)
    base.update(overrides)
    return M.ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return M.Model(tiny_config()).randomize(11)
