import numpy as np
import pytest
import torch

from slotgcd.config import PipelineConfig


def tiny_config(**kwargs) -> PipelineConfig:
    """Small synthetic-backbone config used across the suite."""
    cfg = PipelineConfig()
    cfg.backbone.kind = "synthetic"
    cfg.backbone.feat_dim = 16
    cfg.backbone.grid_size = 8
    cfg.backbone.part_vocab = 48
    cfg.backbone.noise_std = 0.02
    cfg.clusterer.k_max = 8
    cfg.clusterer.d_slot = 16
    cfg.decoder.hidden = 32
    cfg.representation.proj_hidden = 64
    cfg.representation.proj_out = 32
    cfg.data.n_classes = 4
    cfg.data.instances_per_class = 8
    cfg.data.parts_min = 2
    cfg.data.parts_max = 4
    cfg.optim.epochs = 2
    cfg.optim.batch_size = 8
    for key, value in kwargs.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
