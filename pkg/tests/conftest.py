import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diffrl.diffusion import SamplerConfig, build_schedule
from diffrl.model import DenoiserParams
from diffrl.tasks import WorldSpec


@pytest.fixture
def world():
    return WorldSpec(n_composition=200, n_portrait=200, n_preference=200)


@pytest.fixture
def schedule():
    return build_schedule(100, 1e-4, 0.02)


@pytest.fixture
def tiny_params(world):
    return DenoiserParams.init(world.sample_dim, world.context_dim, (6,), np.random.default_rng(3))


@pytest.fixture
def small_sampler():
    return SamplerConfig(num_inference_steps=10, eta=1.0, guidance_scale=1.5)
