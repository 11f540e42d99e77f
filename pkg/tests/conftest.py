import dataclasses

import pytest

from lkcount import data as data_mod
from lkcount import model as model_mod


@pytest.fixture(scope="session")
def small_dataset():
    """64/16/16 desk-style splits, shared across tests that train briefly."""
    cfg = dataclasses.replace(data_mod.DatasetConfig(), split_sizes=(64, 16, 16), seed=11)
    return cfg, data_mod.gen_dataset(cfg)


@pytest.fixture(scope="session")
def small_model_config():
    """A fast f32 model (one stage, small kernels) for pipeline tests."""
    return model_mod.ModelConfig(
        in_channels=1,
        stem_channels=4,
        stages=[model_mod.StageConfig(channels=8, blocks=1, k_large=7, k_small=3, stride=2)],
        head=model_mod.HeadConfig(pool=(2, 2), hidden=16, dropout=0.5),
    )
