"""Shared fixtures: tiny scenes, models and replay batches"""

import numpy as np
import pytest
import torch

from modules.replay_buffer import ReplayBuffer
from modules.sim2d import SceneConfig, Sim2DEnv, TaskSpec
from modules.stages import RandomPolicy, collect_episode
from modules.world_model import WorldModelConfig
from utils.config import Config

TINY = {
    "experiment": {
        "name": "tiny",
        "seeds": [0],
        "budgets": {"explore": 40, "adapt": 20, "dense-task": 40},
    },
    "scene": {"preset": "red_block", "image_size": 16, "episode_length": 20},
    "model": {
        "deter": 16,
        "stoch_factors": 4,
        "stoch_classes": 4,
        "hidden": 32,
        "mlp_layers": 2,
        "image_feat": 32,
        "proprio_feat": 8,
        "cnn_depth": 4,
        "object_latent": 8,
        "extractor_width": 32,
        "extractor_layers": 2,
        "object_depth": 4,
    },
    "explore": {"k": 3},
    "agent": {"horizon": 3, "hidden": 32, "layers": 2, "imagine_starts": 32},
    "replay": {"capacity": 1000, "batch_size": 4, "seq_len": 8},
    "trainer": {"checkpoint_every": 1},
    "output": {"recon_frames": 3},
}


def tiny_config(**sections):
    """Tiny configuration with optional per-section overrides"""
    config = Config.from_dict(TINY)
    for section, values in sections.items():
        for key, value in values.items():
            config.set(f"{section}.{key}", value)
    return config


def collect_random(scene, count, seed=0, task=None):
    """Episodes of uniform random actions"""
    env = Sim2DEnv(scene, task or TaskSpec())
    policy = RandomPolicy(np.random.default_rng(seed))
    return [collect_episode(env, policy, seed + i).episode for i in range(count)]


def to_torch(batch, dtype=torch.float64):
    tensors = {}
    for key, value in batch.items():
        tensor = torch.as_tensor(value)
        tensors[key] = tensor.to(dtype) if tensor.is_floating_point() else tensor
    return tensors


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def scene(config):
    return SceneConfig.from_section(config.section("scene"))


@pytest.fixture
def replay(scene):
    buffer = ReplayBuffer(capacity=1000, seq_len=8, seed=0)
    for episode in collect_random(scene, 2):
        buffer.append_episode(episode)
    return buffer


@pytest.fixture
def batch(replay):
    return replay.sample_batch(4, 8, seed=0)


@pytest.fixture
def micro_scene():
    return SceneConfig.from_dict({"preset": "red_block", "image_size": 8, "episode_length": 10})


@pytest.fixture
def micro_model_config():
    """8x8 images, h=16, 4x4 categorical latent, one object, double precision, no sampling, plain KL"""
    return WorldModelConfig(
        image_size=8,
        channels=3,
        proprio_dim=5,
        action_dim=3,
        num_objects=1,
        deter=16,
        stoch_factors=4,
        stoch_classes=4,
        hidden=16,
        mlp_layers=2,
        image_feat=16,
        proprio_feat=8,
        cnn_depth=4,
        object_latent=8,
        extractor_width=16,
        extractor_layers=2,
        object_depth=4,
        kl_balance=None,
        free_bits=0.0,
        sample_latents=False,
        dtype="float64",
    )


@pytest.fixture
def micro_batch(micro_scene):
    buffer = ReplayBuffer(capacity=100, seq_len=6, seed=0)
    for episode in collect_random(micro_scene, 2, seed=3):
        buffer.append_episode(episode)
    return to_torch(buffer.sample_batch(2, 6, seed=1))
