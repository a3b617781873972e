import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from mtvnet.config import LevelSpec, ModelConfig, TrainConfig, preset


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def desk_configs():
    return preset("desk")


def micro_model_config(**overrides) -> ModelConfig:
    """Tiny single-level config for gradient checks (8^3 context)."""
    kwargs = dict(
        levels=(LevelSpec(8, 2, 1, svhat_layers_per_block=1),),
        window_size=4, cat_size=2, embed_channels=8, skip_channels=4,
        heads=2, mlp_ratio=2.0, scale=2)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def micro_two_level_config(**overrides) -> ModelConfig:
    """Two-level micro config exercising cross-level attention."""
    kwargs = dict(
        levels=(LevelSpec(16, 4, 1, svhat_layers_per_block=1),
                LevelSpec(8, 2, 1, svhat_layers_per_block=1)),
        window_size=4, cat_size=2, embed_channels=8, skip_channels=4,
        heads=2, mlp_ratio=2.0, scale=2)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def micro_train_config(**overrides) -> TrainConfig:
    kwargs = dict(batch_size=2, lr=1e-3, betas=(0.9, 0.999),
                  milestones=(10, 14), total_iters=20, loss="l1", seed=0)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)
