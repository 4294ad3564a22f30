"""Desk-scale default profiles used by the CLI and the reproduction suite.

The dataclass defaults in the individual modules record the source training
recipe; the profiles here shrink everything to sizes that train in minutes
on a laptop CPU while keeping every mechanism exercised end to end.
"""

from __future__ import annotations

from dataclasses import replace

from .data import SynthSpec, default_vocab
from .diffusion import NoiseSchedule, make_schedule
from .guidance import GuidanceConfig
from .inference import InferenceConfig
from .model import ModelConfig
from .training import TrainConfig

TOY_CORPUS_SEED = 2024


def toy_model_config() -> ModelConfig:
    # attention sits at the two coarser levels; full-resolution attention at
    # 32x32 costs far more than it teaches at this scale
    return ModelConfig(
        image_size=32,
        channels=3,
        base_width=32,
        levels=3,
        heads=4,
        embed_dim=64,
        vocab=default_vocab(),
        attention_levels=(1, 2),
        max_tokens=12,
    )


def toy_schedule() -> NoiseSchedule:
    return make_schedule(1000, 1e-4, 0.02)


def toy_corpus_spec(n_stories: int = 200, seed: int = TOY_CORPUS_SEED) -> SynthSpec:
    return SynthSpec(n_stories=n_stories, min_frames=4, max_frames=8,
                     image_size=32, seed=seed)


def toy_train_config(stage: str, seed: int = 0) -> TrainConfig:
    if stage == "single_frame":
        return TrainConfig(stage=stage, learning_rate=2e-3, batch_size=16,
                           iterations=1200, seed=seed)
    if stage == "multi_frame_1ref":
        return TrainConfig(stage=stage, learning_rate=1e-3, batch_size=16,
                           iterations=700, seed=seed)
    if stage == "multi_frame_Nref":
        return TrainConfig(stage=stage, learning_rate=1e-3, batch_size=16,
                           iterations=700, seed=seed)
    raise ValueError(f"unknown stage: {stage!r}")


def toy_inference_config(candidates: int = 10, seed: int = 0) -> InferenceConfig:
    return InferenceConfig(ddim_steps=40, guidance=GuidanceConfig(w_v=7.0, w_t=3.5),
                           window=3, candidates_per_frame=candidates, seed=seed)


def eval_inference_config(seed: int = 0) -> InferenceConfig:
    """Configuration for consistency evaluations: a single candidate per
    frame so measured effects come from the conditioning, not selection."""
    return replace(toy_inference_config(seed=seed), candidates_per_frame=1)
