"""Forward noising, deterministic DDIM reverse steps, and the denoising loss.

Implements the closed-form forward process

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

and the eta=0 (deterministic) DDIM update

    xhat_0 = (x_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t)
    x_prev = sqrt(abar_prev) * xhat_0 + sqrt(1 - abar_prev) * eps_pred

over a discrete schedule of T steps. Timesteps are 0-indexed and t=0 carries
the least noise. The "fully clean" point (abar = 1) is addressed with the
explicit CLEAN sentinel, never by indexing the schedule tables out of range.

All operations are pure functions over immutable inputs and are safe to call
from concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

# Images and latents are plain tensors of shape [channels, height, width]
# (optionally with a leading batch dimension).
LatentImage = torch.Tensor

# Timestep sentinel for the noise-free state, where abar = 1 exactly.
CLEAN = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables beta_t, alpha_t = 1 - beta_t, abar_t = prod_{i<=t} alpha_i.

    Stored in float64 so that the cumulative product stays accurate for
    schedules of a thousand steps.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            v = getattr(self, name)
            if v.ndim != 1 or v.shape != self.betas.shape:
                raise ValueError(f"{name} must be a vector matching betas in length")
        if not (np.all(self.betas > 0.0) and np.all(self.betas < 1.0)):
            raise ValueError("every beta must lie in (0, 1)")

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """abar at timestep t; CLEAN (-1) denotes the noise-free state."""
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} out of range [0, {self.T})")
        return float(self.alpha_bars[t])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule with betas interpolated from beta_start to beta_end.

    The endpoints are inclusive, so T=1 yields the single beta `beta_start`.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind: {kind!r}")
    if T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _noise_coeffs(t: int | torch.Tensor, sched: NoiseSchedule, like: torch.Tensor):
    """(sqrt(abar), sqrt(1-abar)) at t, computed in float64 before casting so
    the per-sample path matches the scalar path bitwise."""
    if isinstance(t, torch.Tensor):
        if t.ndim != 1 or like.ndim < 2 or t.shape[0] != like.shape[0]:
            raise ValueError("vector t must have one entry per batch sample")
        abs_ = [sched.alpha_bar(int(ti)) for ti in t.tolist()]
        shape = (-1,) + (1,) * (like.ndim - 1)
        ca = torch.tensor([math.sqrt(a) for a in abs_], dtype=like.dtype,
                          device=like.device).view(shape)
        cb = torch.tensor([math.sqrt(1.0 - a) for a in abs_], dtype=like.dtype,
                          device=like.device).view(shape)
        return ca, cb
    ab = sched.alpha_bar(int(t))
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def add_noise(x0: LatentImage, eps: LatentImage, t: int | torch.Tensor,
              sched: NoiseSchedule) -> LatentImage:
    """Sample the forward marginal: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ca, cb = _noise_coeffs(t, sched, x0)
    return ca * x0 + cb * eps


def ddim_step(x_t: LatentImage, eps_pred: LatentImage, t: int, t_prev: int,
              sched: NoiseSchedule) -> LatentImage:
    """One deterministic DDIM update from timestep t to t_prev (t_prev < t).

    t_prev may be CLEAN, in which case the returned tensor is the clean-image
    estimate xhat_0 itself.
    """
    if x_t.shape != eps_pred.shape:
        raise ValueError("x_t and eps_pred must share a shape")
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be strictly less than t ({t})")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    if ab_t <= 0.0:
        raise ValueError("abar at t must be positive")
    xhat0 = (x_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * xhat0 + math.sqrt(1.0 - ab_prev) * eps_pred


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly spaced descending sub-sequence of [0, T) used for sampling.

    Always starts at T-1 and ends at 0; `steps` may not exceed T.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"cannot place {steps} distinct timesteps in [0, {T})")
    if steps == 1:
        return [T - 1]
    grid = np.linspace(T - 1, 0, steps)
    ts = [int(round(g)) for g in grid]
    # rounding can collide for steps close to T; repair while keeping order
    for i in range(1, len(ts)):
        if ts[i] >= ts[i - 1]:
            ts[i] = ts[i - 1] - 1
    if ts[-1] < 0:
        raise ValueError("timestep grid collapsed below zero; reduce steps")
    return ts


def training_loss(eps_true: LatentImage, eps_pred: LatentImage) -> torch.Tensor:
    """Mean squared error between true and predicted noise (mean reduction)."""
    if eps_true.shape != eps_pred.shape:
        raise ValueError("eps_true and eps_pred must share a shape")
    return torch.mean((eps_true - eps_pred) ** 2)
