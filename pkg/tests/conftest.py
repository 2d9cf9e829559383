"""Shared fixtures for the sampler test suite."""

from pathlib import Path

import pytest
import torch

from egm.config import NetConfig, TrainConfig
from egm.core.types import IsingSpec, JointMoGSpec

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config" / "tasks"


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture
def tiny_net() -> NetConfig:
    return NetConfig(hidden_dim=16, num_layers=2, time_embed_dim=8, cont_embed_dim=8)


@pytest.fixture
def ising_config(tiny_net) -> TrainConfig:
    """Bootstrapped 2x2 Ising run small enough for unit tests."""
    return TrainConfig(
        task=IsingSpec(L=2, beta=0.2),
        net=tiny_net,
        num_mc_samples=16,
        epsilon=0.05,
        batch_size=8,
        outer_iterations=2,
        inner_iterations=3,
        samples_per_outer=16,
        buffer_capacity=64,
        simulation_steps=10,
        log_interval=2,
    )


@pytest.fixture
def mog_config(tiny_net) -> TrainConfig:
    """Plain-mode JointMoG run on two pairs."""
    return TrainConfig(
        task=JointMoGSpec(d=2),
        net=tiny_net,
        num_mc_samples=16,
        batch_size=8,
        outer_iterations=1,
        inner_iterations=2,
        samples_per_outer=16,
        buffer_capacity=64,
        simulation_steps=10,
        log_interval=1,
    )


@pytest.fixture
def anyio_backend():
    return "asyncio"
