import numpy as np
import pytest

from multiad.backbone import BackboneConfig
from multiad.config import PipelineConfig
from multiad.data import generate_synthetic_dataset


def tiny_config(**changes) -> PipelineConfig:
    """A 32x32 model small enough to train for a few steps inside a unit test."""
    base = PipelineConfig(
        backbone=BackboneConfig(stem_filters=4, widths=(4, 8, 8, 8), blocks_per_stage=1, se_reduction=2),
        input_extent=32,
        epochs=1,
        batch_size=4,
        disc_width_factor=1 / 32,
    )
    return base.replace(**changes) if changes else base


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_synthetic_dataset(5, 12, 6, 32, n_test_normal=6)
