import numpy as np
import pytest

from pointvoc.encoders import ModelConfig, init_params


def tiny_model_config(**overrides):
    """Small dims keep finite-difference sweeps fast."""
    kwargs = dict(
        n_classes=4,
        scene_extent=np.array([4.0, 4.0, 2.5]),
        image_hw=(48, 48),
        queries=3,
        feat_dim=16,
        embed_dim=8,
        point_hidden1=8,
        point_hidden2=12,
        img_hidden=12,
        query_dim=6,
        head_hidden=12,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture
def tiny_mcfg():
    return tiny_model_config()


@pytest.fixture
def tiny_params(tiny_mcfg):
    return init_params(tiny_mcfg, seed=1)
