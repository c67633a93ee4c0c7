import numpy as np
import pytest

from stacksv.model import ModelConfig


def tiny_config(**overrides):
    """Small all-features config used across the unit tests (float64-friendly)."""
    base = dict(input_dim=6, input_layers=3, backbone_dim=8, d2_bottleneck=4,
                d2_layers=2, d2_growth=4, num_heads=2, head_dim=4,
                asp_bottleneck=4, embed_dim=5)
    base.update(overrides)
    return ModelConfig(**base).validate()


def desk_config(**overrides):
    """The configuration the training-based tests run (matches the synthetic
    corpus geometry: 32 channels, 5 layers)."""
    base = dict(input_dim=32, input_layers=5, backbone_dim=16, d2_bottleneck=4,
                d2_layers=4, d2_growth=4, num_heads=4, head_dim=4,
                asp_bottleneck=8, embed_dim=16)
    base.update(overrides)
    return ModelConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
