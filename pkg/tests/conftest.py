import numpy as np
import pytest
import torch

from symdistill.config import RunConfig, build_config
from symdistill.featstore import FeatureSet
from symdistill.selfcheck import tiny_config, tiny_model

TINY_KEYS = dict(vocab_size=8, seq_len=4, d_model=16, n_heads=2, dec_depth=2, enc_depth=1,
                 proj_hidden=32, proj_bottleneck=8, n_prototypes=16)


@pytest.fixture
def model64():
    return tiny_model(0)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def tiny_run_config(**overrides) -> RunConfig:
    values = dict(TINY_KEYS, epochs=2, batch_size=4, warmup_epochs=1, eval_every_epochs=1, lr_base=1e-3)
    values.update(overrides)
    return build_config(values)


def random_features(n=6, views=2, grid=(2, 2), d_t=8, n_classes=3, seed=0) -> FeatureSet:
    rng = np.random.default_rng(seed)
    p = 1 + grid[0] * grid[1]
    tokens = rng.standard_normal((n, views, p, d_t)).astype(np.float32)
    labels = np.arange(n) % n_classes
    return FeatureSet(tokens=tokens, grid_h=grid[0], grid_w=grid[1], labels=labels, n_classes=n_classes)


@pytest.fixture
def feats():
    return random_features()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
