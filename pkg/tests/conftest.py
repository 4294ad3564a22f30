import numpy as np
import pytest
import torch

from storydiff.data import SynthSpec, default_vocab, synth_stories
from storydiff.diffusion import make_schedule
from storydiff.model import ModelConfig, StoryUNet


@pytest.fixture()
def tiny_config():
    # one attention block per level keeps the full conditioning pathway while
    # staying fast enough for exhaustive checks
    return ModelConfig(image_size=16, channels=3, base_width=8, levels=2,
                       heads=2, embed_dim=16, vocab=default_vocab(),
                       attention_levels=None, max_tokens=12)


@pytest.fixture()
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return StoryUNet(tiny_config)


@pytest.fixture()
def tiny_ctx_model(tiny_config):
    from dataclasses import replace
    torch.manual_seed(0)
    return StoryUNet(replace(tiny_config, context_enabled=True))


@pytest.fixture()
def tiny_sched():
    return make_schedule(100)


@pytest.fixture(scope="session")
def small_corpus():
    return synth_stories(SynthSpec(n_stories=10, min_frames=4, max_frames=5,
                                   image_size=16, seed=123))


@pytest.fixture(scope="session")
def default_size_corpus():
    return synth_stories(SynthSpec(n_stories=8, min_frames=4, max_frames=5,
                                   image_size=32, seed=321))


@pytest.fixture()
def rng():
    return torch.Generator().manual_seed(7)


@pytest.fixture()
def nprng():
    return np.random.default_rng(7)
