"""
Shared fixtures: a tiny 16x16, L=2 configuration and a small phantom dataset.
"""

import pytest
import torch

from hvae.config import RunConfig
from hvae.hvae_model import HierarchicalVAE
from hvae.phantom import PhantomDataset, make_dataset

TINY = {
    "levels": 2,
    "latent_channels": 2,
    "k": 3,
    "base_channels": 4,
    "max_channels": 8,
    "resolution": 16,
    "batch_size": 4,
    "max_iters": 2,
    "checkpoint_every": 1000,
    "log_every": 1,
}


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    def _make(**overrides) -> RunConfig:
        values = dict(TINY)
        values.update(overrides)
        return RunConfig(**values)

    return _make


@pytest.fixture
def tiny_model(tiny_cfg):
    def _make(variant="nvae", dtype=torch.float32, seed=0, **overrides) -> HierarchicalVAE:
        torch.manual_seed(seed)
        model = HierarchicalVAE.from_config(tiny_cfg(variant=variant, **overrides))
        return model.to(dtype)

    return _make


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    make_dataset(20, seed=3, out_dir=out, resolution=(16, 16))
    return out


@pytest.fixture(scope="session")
def phantom_dataset(phantom_dir):
    return PhantomDataset(phantom_dir)
