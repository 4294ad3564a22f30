"""Auto-regressive story generation and continuation.

Frames are sampled sequentially with a deterministic DDIM loop under dual
classifier-free guidance. Each frame conditions on the nearest preceding
(image, prompt) pairs within a sliding window; the visual context is
re-extracted at every sampling step because the extraction timestep tracks
the sampler's current timestep. Per frame, several candidates are drawn from
deterministically derived seeds and a scorer picks the one that enters the
history, so later frames condition on the selected images.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .context import extract_context, with_frame_index
from .data import render_prompt_exemplar
from .diffusion import CLEAN, NoiseSchedule, ddim_step, ddim_timesteps
from .guidance import GuidanceConfig, guided_eps
from .metrics import toy_embed
from .model import StoryUNet
from .stories import Story, StoryFrame


@dataclass(frozen=True)
class InferenceConfig:
    ddim_steps: int = 40
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    window: int = 3
    candidates_per_frame: int = 10
    seed: int = 0
    select_in_loop: bool = True
    # extract the visual context once at the first sampler step instead of
    # per step; a documented approximation, off by default
    cached_context: bool = False

    def __post_init__(self):
        if self.ddim_steps < 1 or self.candidates_per_frame < 1 or self.window < 0:
            raise ValueError("ddim_steps and candidates must be >= 1, window >= 0")


def derive_seed(base: int, *parts: int) -> int:
    """Stable per-frame/per-candidate seed derivation."""
    text = ":".join(str(p) for p in (base, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") % (2 ** 62)


def sample_image(prompt: str, refs, cfg: InferenceConfig, model: StoryUNet,
                 sched: NoiseSchedule, rng: torch.Generator,
                 extraction_hook=None, equal_ref_noise: bool = False) -> np.ndarray:
    """One guided DDIM run; refs is a nearest-first list of (image, caption).

    With no refs the context slot holds the null condition throughout, which
    reduces the guidance formula to pure text-scale guidance (the visual
    term cancels exactly).
    """
    cfg_m = model.config
    text = model.encode_text(prompt)
    ref_tensors = [(torch.from_numpy(np.asarray(img, dtype=np.float32)), cap)
                   for img, cap in refs]
    if ref_tensors and not cfg_m.context_enabled:
        raise ValueError("reference conditioning requires a model with image "
                         "cross-attention")
    # a base model without the image branch samples with the context slot
    # absent; the guidance formula degenerates to text-scale guidance either way
    guidance = cfg.guidance
    if not cfg_m.context_enabled:
        guidance = replace(guidance, null_context=None)
    empty_slot = guidance.null_context
    with torch.no_grad():
        x = torch.randn(cfg_m.channels, cfg_m.image_size, cfg_m.image_size,
                        generator=rng)
        ts = ddim_timesteps(sched.T, cfg.ddim_steps)
        ctx_cached = None
        for step, t in enumerate(ts):
            if ref_tensors:
                if cfg.cached_context and ctx_cached is not None:
                    ctx = ctx_cached
                else:
                    ctx = extract_context(ref_tensors, t, model, sched, rng,
                                          hook=extraction_hook,
                                          equal_noise=equal_ref_noise)
                    if cfg.cached_context:
                        ctx_cached = ctx
            else:
                ctx = empty_slot
            eps = guided_eps(x, t, ctx, text, guidance, model)
            t_prev = ts[step + 1] if step + 1 < len(ts) else CLEAN
            x = ddim_step(x, eps, t, t_prev, sched)
    return x.numpy().astype(np.float32)


def generate_frame(prompts_so_far, images_so_far, prompt_k: str,
                   cfg: InferenceConfig, model: StoryUNet, sched: NoiseSchedule,
                   rng: torch.Generator, extraction_hook=None,
                   frame_index: int | None = None) -> np.ndarray:
    """Generate the next frame given the selected history."""
    if len(prompts_so_far) != len(images_so_far):
        raise ValueError("history prompts and images must align")
    window = cfg.window if model.config.context_enabled else 0
    n_refs = min(window, len(images_so_far))
    refs = [(images_so_far[-(i + 1)], prompts_so_far[-(i + 1)]) for i in range(n_refs)]
    hook = with_frame_index(extraction_hook, frame_index) if frame_index is not None \
        else extraction_hook
    return sample_image(prompt_k, refs, cfg, model, sched, rng,
                        extraction_hook=hook)


def select_best(candidates, prompt: str, scorer) -> int:
    """Index of the highest-scoring candidate; ties break to the lowest index."""
    if not candidates:
        raise ValueError("candidates must be non-empty")
    best, best_score = 0, None
    for i, cand in enumerate(candidates):
        s = float(scorer(cand, prompt))
        if not np.isfinite(s):
            raise ValueError(f"scorer returned a non-finite value for candidate {i}")
        if best_score is None or s > best_score:
            best, best_score = i, s
    return best


def exemplar_scorer(image_size: int = 32):
    """Default toy scorer: embedding similarity to a rendered prompt exemplar."""

    def score(image: np.ndarray, prompt: str) -> float:
        return float(np.dot(toy_embed(image), toy_embed(render_prompt_exemplar(prompt, image_size))))

    return score


def _resolve_base_seed(cfg: InferenceConfig, rng) -> int:
    if rng is None:
        return cfg.seed
    return int(torch.randint(0, 2 ** 31, (1,), generator=rng))


def _generate_sequence(storyline, cfg, model, sched, base_seed, scorer,
                       history, report, extraction_hook=None) -> Story:
    """Shared driver: history is a nearest-last list of (image, prompt) pairs
    that seeds the sliding window but does not enter the output story."""
    scorer = scorer or exemplar_scorer(model.config.image_size)
    # a base model without the image branch generates frames independently
    window = cfg.window if model.config.context_enabled else 0
    frames = []
    gen_images: list[np.ndarray] = []
    gen_prompts: list[str] = []
    for k, prompt in enumerate(storyline):
        pool = list(zip(reversed(gen_images), reversed(gen_prompts)))
        pool += list(reversed(history))
        refs = pool[:window]
        candidates = []
        for c in range(cfg.candidates_per_frame):
            g = torch.Generator().manual_seed(derive_seed(base_seed, k, c))
            hook = with_frame_index(extraction_hook, k) if extraction_hook else None
            candidates.append(sample_image(prompt, refs, cfg, model, sched, g,
                                           extraction_hook=hook))
        scores: list[float] = []
        if cfg.select_in_loop:
            def recording(img, prm):
                s = float(scorer(img, prm))
                scores.append(s)
                return s
            chosen = select_best(candidates, prompt, recording)
        else:
            chosen = 0
        if report is not None:
            report.append({"frame": k, "prompt": prompt, "seed": base_seed,
                           "n_candidates": len(candidates), "scores": scores,
                           "selected": chosen})
        img = candidates[chosen]
        gen_images.append(img)
        gen_prompts.append(prompt)
        frames.append(StoryFrame(image=img, caption=prompt or "(empty prompt)",
                                 narration=prompt or "(empty prompt)", index=k))
    return Story(frames=frames)


def generate_story(storyline, cfg: InferenceConfig, model: StoryUNet,
                   sched: NoiseSchedule, rng: torch.Generator | None = None,
                   scorer=None, report: list | None = None,
                   extraction_hook=None) -> Story:
    """Open-ended generation: one frame per prompt, each conditioning on the
    selected preceding frames."""
    storyline = list(storyline)
    if not storyline:
        raise ValueError("storyline must be non-empty")
    base = _resolve_base_seed(cfg, rng)
    return _generate_sequence(storyline, cfg, model, sched, base, scorer,
                              history=[], report=report,
                              extraction_hook=extraction_hook)


def generate_test_frames(stories, cfg: InferenceConfig, model: StoryUNet,
                         sched: NoiseSchedule, teacher_forced: bool = True,
                         prompt_field: str = "caption") -> list[Story]:
    """Regenerate every story of a test corpus, for metric computation.

    teacher_forced conditions each frame on the ground-truth preceding
    frames (test-set parity); otherwise frames chain auto-regressively on
    the previously generated ones.
    """
    if prompt_field not in ("caption", "narration"):
        raise ValueError("prompt_field must be 'caption' or 'narration'")
    out = []
    for si, story in enumerate(stories):
        prompts = [getattr(f, prompt_field) for f in story.frames]
        if teacher_forced:
            frames = []
            for k in range(len(story)):
                g = torch.Generator().manual_seed(derive_seed(cfg.seed, si, k))
                history_imgs = [f.image for f in story.frames[:k]]
                img = generate_frame(prompts[:k], history_imgs, prompts[k],
                                     cfg, model, sched, g)
                frames.append(StoryFrame(image=img, caption=prompts[k],
                                         narration=story.frames[k].narration,
                                         index=k))
            out.append(Story(frames=frames))
        else:
            per_story = replace(cfg, seed=derive_seed(cfg.seed, si))
            out.append(generate_story(prompts, per_story, model, sched))
    return out


def continue_story(ref_image: np.ndarray, ref_caption: str, storyline,
                   cfg: InferenceConfig, model: StoryUNet, sched: NoiseSchedule,
                   rng: torch.Generator | None = None, scorer=None,
                   report: list | None = None) -> Story:
    """Continuation: the given pair is the nearest reference for frame 0 and
    slides through the window as generated frames accumulate."""
    mc = model.config
    if not mc.context_enabled:
        raise ValueError("story continuation requires a model with image "
                         "cross-attention")
    want = (mc.channels, mc.image_size, mc.image_size)
    if tuple(ref_image.shape) != want:
        raise ValueError(f"reference image shape {tuple(ref_image.shape)} != model {want}")
    storyline = list(storyline)
    if not storyline:
        return Story(frames=[])
    base = _resolve_base_seed(cfg, rng)
    return _generate_sequence(storyline, cfg, model, sched, base, scorer,
                              history=[(ref_image, ref_caption)], report=report)
