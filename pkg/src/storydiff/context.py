"""Visual context encoding from preceding frames.

Each reference frame is noised to a reduced timestep t' = floor(i * t / 10)
(i = 1 for the nearest frame), pushed once through the shared denoising UNet
under its own caption, and the post-self-attention activations are harvested.
Features of several references are concatenated token-wise per layer; the
increasing noise level over i doubles as the temporal positional encoding,
so no extra embedding is added.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import torch

from .diffusion import NoiseSchedule, add_noise
from .model import FeaturePyramid, StoryUNet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContextRef:
    """Provenance of one reference's contribution to a context block."""

    index: int                 # distance i from the current frame, 1-based
    timestep: int              # t' used when extracting this reference
    spans: tuple[int, ...]     # token count contributed per attention layer


@dataclass(frozen=True)
class ExtractionEvent:
    """Instrumentation record emitted once per reference extraction."""

    index: int
    timestep: int
    t_prime: int
    frame_index: int | None = None


@dataclass(frozen=True)
class ContextFeatures:
    """Per-attention-layer concatenated reference tokens plus metadata.

    layers[j] is [sum of spans, width_j]; refs are ordered nearest-first and
    their extraction timesteps are non-decreasing along the list.
    """

    layers: tuple[torch.Tensor, ...]
    levels: tuple[int, ...]
    refs: tuple[ContextRef, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.levels):
            raise ValueError("one level tag per layer is required")
        for r in self.refs:
            if len(r.spans) != len(self.layers):
                raise ValueError("metadata spans must cover every layer")
        for j, layer in enumerate(self.layers):
            total = sum(r.spans[j] for r in self.refs)
            if layer.shape[0] != total:
                raise ValueError(f"layer {j} holds {layer.shape[0]} tokens, metadata says {total}")
        steps = [r.timestep for r in self.refs]
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise ValueError("extraction timesteps must be non-decreasing nearest-first")

    def validate_for(self, model: StoryUNet):
        expected = model.attn_layer_levels
        if self.levels != expected:
            raise ValueError(f"context levels {self.levels} do not match model layers {expected}")
        for j, level in enumerate(expected):
            want = model.config.width(level)
            if self.layers[j].shape[1] != want:
                raise ValueError(f"context layer {j} width {self.layers[j].shape[1]} != {want}")


def context_timestep(t: int, i: int, sched: NoiseSchedule) -> int:
    """Extraction timestep for the i-th preceding frame: floor(i*t/10), clamped."""
    if i < 1:
        raise ValueError("reference index i must be >= 1")
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} out of range [0, {sched.T})")
    return min(max((i * t) // 10, 0), sched.T - 1)


def pyramid_to_context(pyramid: FeaturePyramid, index: int, timestep: int) -> ContextFeatures:
    """Wrap a single reference's feature pyramid as a one-entry context."""
    spans = tuple(layer.shape[0] for layer in pyramid.layers)
    ref = ContextRef(index=index, timestep=timestep, spans=spans)
    return ContextFeatures(layers=pyramid.layers, levels=pyramid.levels, refs=(ref,))


def concat_contexts(parts: list[ContextFeatures]) -> ContextFeatures:
    """Token-axis concatenation of context blocks, in list order."""
    if not parts:
        raise ValueError("parts must be non-empty")
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    for p in parts[1:]:
        if p.levels != first.levels:
            raise ValueError("all parts must share the layer structure")
        for j, layer in enumerate(p.layers):
            if layer.shape[1] != first.layers[j].shape[1]:
                raise ValueError(f"width mismatch at layer {j}")
    layers = tuple(torch.cat([p.layers[j] for p in parts], dim=0)
                   for j in range(len(first.layers)))
    refs = tuple(r for p in parts for r in p.refs)
    return ContextFeatures(layers=layers, levels=first.levels, refs=refs)


def extract_context(refs, t: int, model: StoryUNet, sched: NoiseSchedule,
                    rng: torch.Generator, hook=None,
                    equal_noise: bool = False) -> ContextFeatures:
    """Encode preceding (image, caption) pairs as visual context features.

    refs is ordered nearest-first: refs[0] is the immediately preceding
    frame (i = 1). Each reference is noised with rng-drawn Gaussian noise to
    its own t', denoised once with feature capture and without any visual
    context, and the resulting pyramids are concatenated nearest-first.

    equal_noise extracts every reference at the i=1 timestep; used for
    reference sets that carry no temporal order.
    """
    refs = list(refs)
    if not refs:
        raise ValueError("refs must be non-empty")
    images = torch.stack([img for img, _ in refs])
    t_primes = [context_timestep(t, 1 if equal_noise else i + 1, sched)
                for i in range(len(refs))]
    eps = torch.randn(images.shape, generator=rng, dtype=images.dtype)
    noised = add_noise(images, eps, torch.tensor(t_primes), sched)
    texts = [model.encode_text(caption) for _, caption in refs]
    _, pyramids = model.denoise_batch(noised, torch.tensor(t_primes), texts,
                                      contexts=[None] * len(refs),
                                      capture_features=True)
    parts = []
    for i, (pyr, tp) in enumerate(zip(pyramids, t_primes)):
        idx = 1 if equal_noise else i + 1
        parts.append(pyramid_to_context(pyr, index=idx, timestep=tp))
        event = ExtractionEvent(index=idx, timestep=t, t_prime=tp)
        logger.debug("context extraction i=%d t=%d t_prime=%d", idx, t, tp)
        if hook is not None:
            hook(event)
    return concat_contexts(parts)


def with_frame_index(hook, frame_index: int):
    """Adapt an extraction hook so emitted events carry the frame index."""
    if hook is None:
        return None

    def wrapped(event: ExtractionEvent):
        hook(replace(event, frame_index=frame_index))

    return wrapped
