"""Dual classifier-free guidance and training-time condition dropout.

The guided noise estimate extrapolates along two axes with separate scales,
one for the visual context and one for the text prompt:

    e_bar = e(0, 0)
          + w_v * (e(ctx, 0)   - e(0, 0))
          + w_t * (e(ctx, txt) - e(ctx, 0))

where 0 denotes the learned null condition. Exactly three network
evaluations are performed per call. The (null-context, text) combination is
never part of this formula; when the context slot itself holds the null
condition the w_v term cancels exactly and the expression degenerates to
plain text-scale guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffusion import LatentImage
from .model import NULL_CONTEXT, NULL_TEXT, StoryUNet


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales plus the null-condition handles they extrapolate from."""

    w_v: float = 7.0
    w_t: float = 3.5
    null_text: object = NULL_TEXT
    null_context: object = NULL_CONTEXT

    def __post_init__(self):
        import math
        if not (math.isfinite(self.w_v) and math.isfinite(self.w_t)):
            raise ValueError("guidance scales must be finite")


def guided_eps(x_t: LatentImage, t: int, ctx, text, g: GuidanceConfig,
               model: StoryUNet) -> LatentImage:
    """Noise prediction under dual classifier-free guidance.

    ctx: ContextFeatures or the null-context handle; text: TextEmbedding or
    the null-text handle.
    """
    e_uncond = model.denoise(x_t, t, g.null_text, g.null_context)
    e_visual = model.denoise(x_t, t, g.null_text, ctx)
    e_full = model.denoise(x_t, t, text, ctx)
    return e_uncond + g.w_v * (e_visual - e_uncond) + g.w_t * (e_full - e_visual)


def drop_conditions(batch: list, p_text: float, p_ctx: float,
                    rng: torch.Generator) -> list:
    """Randomly null out conditions of training samples, per-sample and
    independently for the two modalities.

    Samples must expose `.with_text_dropped()` and `.with_context_dropped()`
    (see training.Triplet). The context is dropped as a unit, never
    individual reference pairs.
    """
    if not (0.0 <= p_text <= 1.0 and 0.0 <= p_ctx <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    out = []
    for sample in batch:
        draws = torch.rand(2, generator=rng)
        if float(draws[0]) < p_text:
            sample = sample.with_text_dropped()
        if float(draws[1]) < p_ctx:
            sample = sample.with_context_dropped()
        out.append(sample)
    return out
