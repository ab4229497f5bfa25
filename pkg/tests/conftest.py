import dataclasses

import pytest
import torch

from ssgan.config import SsGANConfig
from ssgan.data import make_synthetic_shapes
from ssgan.features import FeatureExtractor

# small everything: 16x16 images, narrow nets, short schedules
TINY_KW = dict(
    batch_size=8,
    image_size=16,
    z_dim=8,
    gf_dim=16,
    df_dim=16,
    sbn_hidden=8,
    eval_interval=2,
    eval_samples=16,
    eval_batch=8,
    checkpoint_interval=2,
    log_interval=1,
    sample_grid=4,
    dataset="shapes10",
)


def tiny_config(**kw) -> SsGANConfig:
    merged = dict(TINY_KW)
    merged.update(kw)
    return SsGANConfig(**merged)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


@pytest.fixture(scope="session")
def shapes16():
    return make_synthetic_shapes(120, 16, seed=0, split="train")


@pytest.fixture(scope="session")
def shapes16_test():
    return make_synthetic_shapes(60, 16, seed=0, split="test")


@pytest.fixture(scope="session")
def shapes32():
    return make_synthetic_shapes(200, 32, seed=1, split="train")


@pytest.fixture(scope="session")
def toy_extractor():
    torch.manual_seed(0)
    return FeatureExtractor(channels=3, num_classes=10, width=8, embed_dim=16).freeze()
