"""Shared micro-scale configurations for the vidsem tests."""

from __future__ import annotations

import copy

import pytest
import torch
import torch.nn as nn

from vidsem.config import DenoiserConfig, ExperimentConfig
from vidsem.denoiser import SemanticDiT
from vidsem.features import FrozenEncoder

TINY_CONFIG = {
    "world": {
        "height": 16, "width": 16, "num_shapes": 2, "min_shapes": 1,
        "size_min": 3, "size_max": 5, "speed_min": 0.5, "speed_max": 2.0,
        "frames": 9, "context_frames": 5, "num_clips": 6, "val_modulo": 3,
        "seed": 0, "workers": 1,
    },
    "encoder": {"patch_size": 4, "depth": 2, "width": 8, "tap_layers": [1, 2], "freeze_seed": 7},
    "pca": {"channels": 8, "max_fit_vectors": None, "seed": 0},
    "codec": {"spatial_factor": 2, "temporal_factor": 4},
    "stage1": {
        "layers": 1, "model_dim": 16, "heads": 2, "context_frames": 2,
        "warmup_steps": 0, "steps": 2, "batch_size": 2, "log_every": 1,
    },
    "stage2": {
        "denoiser": {"layers": 1, "model_dim": 24, "heads": 2, "adaln_lora_rank": 4,
                     "frequency_dim": 16},
        "nested_dropout": {"enabled": True, "channel_set": [2, 4, 8]},
        "mixed_supervision": {"p_predicted": 0.1},
        "warmup_steps": 0, "steps": 2, "batch_size": 2, "log_every": 1,
    },
    "sampler": {"num_steps": 2},
    "guidance": {"w": 0.0, "coarse_c": 2},
    "eval": {"runs": 1, "batch_size": 2, "probe_max_iter": 10},
    "reproduce": {"seeds": [0], "convergence_steps": 2, "convergence_eval_every": 1},
}


@pytest.fixture
def tiny_config_dict() -> dict:
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config(tiny_config_dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict(tiny_config_dict)


@pytest.fixture
def world(tiny_config):
    return tiny_config.world


@pytest.fixture
def encoder(tiny_config) -> FrozenEncoder:
    return FrozenEncoder(tiny_config.encoder)


@pytest.fixture
def dit_config() -> DenoiserConfig:
    return DenoiserConfig(layers=2, model_dim=24, heads=2, adaln_lora_rank=4, frequency_dim=16)


@pytest.fixture
def make_dit(dit_config):
    """Build a SemanticDiT whose zero-initialised output paths are given random weights."""

    def build(latent_channels: int = 4, feature_channels: int = 8, seed: int = 0,
              dtype: torch.dtype = torch.float32) -> SemanticDiT:
        torch.manual_seed(seed)
        model = SemanticDiT(dit_config, latent_channels, feature_channels)
        zeroed = [model.final.linear, model.final.modulation[-1], model.adaln_base[-1]]
        zeroed += [block.adaln_lora[-1] for block in model.blocks]
        for layer in zeroed:
            nn.init.normal_(layer.weight, std=0.05)
            if layer.bias is not None:
                nn.init.normal_(layer.bias, std=0.05)
        return model.to(dtype)

    return build
