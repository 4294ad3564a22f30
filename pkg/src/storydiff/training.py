"""Two-stage training with parameter-group freezing, plus checkpointing.

Stage one trains the base network (no image cross-attention) on single
(image, caption) pairs. Stage two enables the image cross-attention branch
and trains only it, together with the learned null-condition tokens; every
other parameter group is left bit-identical to the input checkpoint. Stage
two runs twice: first with a single preceding pair per sample, then with a
window of several.

Checkpoints are zip archives holding a JSON manifest (model config, stage,
iteration count, schedule betas, rng state as hex) plus one raw
little-endian float32 blob per parameter, keyed by group and parameter name.
Training is deterministic: identical (seed, config, dataset) produce
identical checkpoints.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .context import concat_contexts, context_timestep, extract_context, pyramid_to_context
from .diffusion import NoiseSchedule, add_noise, make_schedule, training_loss
from .guidance import drop_conditions
from .model import NULL_CONTEXT, NULL_TEXT, ModelConfig, StoryUNet
from .stories import Story

STAGES = ("single_frame", "multi_frame_1ref", "multi_frame_Nref")
FROZEN_STAGE2_GROUPS = ("self_attention", "text_cross_attention", "trunk", "text_encoder")
CHECKPOINT_FORMAT = "storydiff-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    # defaults follow the source recipe (lr 1e-5, batch 256, iterations
    # 3000/5000/5000); desk-scale profiles override them
    # (see profiles.toy_train_config).
    learning_rate: float = 1e-5
    batch_size: int = 16
    iterations: int = 1000
    p_text_drop: float = 0.05
    p_ctx_drop: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage: {self.stage!r}")
        # zero learning rate is allowed: it must leave parameters bit-identical
        if self.learning_rate < 0 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("learning_rate must be >= 0, batch_size and "
                             "iterations positive")
        for p in (self.p_text_drop, self.p_ctx_drop):
            if not 0.0 <= p <= 1.0:
                raise ValueError("drop probabilities must lie in [0, 1]")

    @property
    def window(self) -> int:
        return {"single_frame": 0, "multi_frame_1ref": 1, "multi_frame_Nref": 3}[self.stage]


@dataclass(frozen=True)
class Triplet:
    """One training sample: target frame, its prompt, preceding pairs.

    prompt None means the null text condition; refs None means the context
    was dropped to the null condition as a whole. refs is ordered
    nearest-first.
    """

    target: np.ndarray
    prompt: str | None
    refs: tuple | None

    def with_text_dropped(self) -> "Triplet":
        return replace(self, prompt=None)

    def with_context_dropped(self) -> "Triplet":
        return replace(self, refs=None)


def sample_triplet(story: Story, k: int | None = None, window: int = 3,
                   rng: torch.Generator | None = None,
                   allow_initial: bool = False) -> Triplet:
    """Target frame k with its min(k, window) nearest preceding pairs.

    k=None draws a valid index from rng. k=0 is only allowed when
    allow_initial is set (single-frame stage) and yields an empty context.
    """
    lo = 0 if allow_initial else 1
    if len(story) <= lo:
        raise ValueError("story too short for this stage")
    if k is None:
        if rng is None:
            raise ValueError("rng is required when k is not given")
        k = int(torch.randint(lo, len(story), (1,), generator=rng))
    if not lo <= k < len(story):
        raise ValueError(f"frame index {k} out of range [{lo}, {len(story)}) for this stage")
    refs = tuple((story.frames[j].image, story.frames[j].caption)
                 for j in range(k - 1, max(k - window, 0) - 1, -1))
    return Triplet(target=story.frames[k].image,
                   prompt=story.frames[k].caption, refs=refs)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    params: dict                      # group -> name -> float32 ndarray
    schedule: NoiseSchedule
    model_config: ModelConfig
    stage: str
    iteration: int
    rng_state_hex: str


def checkpoint_from_model(model: StoryUNet, sched: NoiseSchedule, stage: str,
                          iteration: int, rng: torch.Generator) -> Checkpoint:
    params = {}
    for group, entries in model.parameter_groups().items():
        params[group] = {name: p.detach().cpu().numpy().astype("<f4", copy=True)
                         for name, p in entries.items()}
    state_hex = bytes(rng.get_state().numpy().tobytes()).hex()
    return Checkpoint(params=params, schedule=sched, model_config=model.config,
                      stage=stage, iteration=iteration, rng_state_hex=state_hex)


def save_checkpoint(ckpt: Checkpoint, path: Path | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state_hex,
        "model_config": _config_to_json(ckpt.model_config),
        "schedule": {"betas": ckpt.schedule.betas.tolist()},
        "params": {},
    }
    blobs = []
    for group in sorted(ckpt.params):
        manifest["params"][group] = {}
        for name in sorted(ckpt.params[group]):
            arr = ckpt.params[group][name]
            file = f"params/{group}/{name}.bin"
            manifest["params"][group][name] = {"shape": list(arr.shape), "file": file}
            blobs.append((file, np.ascontiguousarray(arr, dtype="<f4").tobytes()))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for file, data in blobs:
            zf.writestr(file, data)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format in {path}")
        params = {}
        for group, entries in manifest["params"].items():
            params[group] = {}
            for name, meta in entries.items():
                raw = zf.read(meta["file"])
                arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
                params[group][name] = arr
    betas = np.asarray(manifest["schedule"]["betas"], dtype=np.float64)
    sched = NoiseSchedule(betas=betas, alphas=1.0 - betas,
                          alpha_bars=np.cumprod(1.0 - betas))
    config = _config_from_json(manifest["model_config"])
    return Checkpoint(params=params, schedule=sched, model_config=config,
                      stage=manifest["stage"], iteration=manifest["iteration"],
                      rng_state_hex=manifest["rng_state"])


def _config_to_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["vocab"] = list(cfg.vocab)
    d["attention_levels"] = None if cfg.attention_levels is None else list(cfg.attention_levels)
    return d


def _config_from_json(d: dict) -> ModelConfig:
    d = dict(d)
    d["vocab"] = tuple(d["vocab"])
    if d.get("attention_levels") is not None:
        d["attention_levels"] = tuple(d["attention_levels"])
    return ModelConfig(**d)


def model_from_checkpoint(ckpt: Checkpoint, context_enabled: bool | None = None,
                          strict: bool = True, init_seed: int = 0) -> StoryUNet:
    """Instantiate a model and load checkpoint parameters into it.

    With strict=True every model parameter must be present in the
    checkpoint. strict=False leaves absent parameters at their (seeded)
    fresh initialization, which is how stage two grows the image
    cross-attention branch on top of a stage-one checkpoint.
    """
    cfg = ckpt.model_config
    if context_enabled is not None:
        cfg = replace(cfg, context_enabled=context_enabled)
    torch.manual_seed(init_seed)
    model = StoryUNet(cfg)
    stored = {name: arr for group in ckpt.params.values() for name, arr in group.items()}
    loaded = set()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in stored:
                arr = stored[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {name}: checkpoint "
                                     f"{arr.shape} vs model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))
                loaded.add(name)
            elif strict:
                raise ValueError(f"checkpoint is missing parameter {name}")
    unused = set(stored) - loaded
    if unused and strict:
        raise ValueError(f"checkpoint holds parameters unknown to the model: {sorted(unused)}")
    return model


# --------------------------------------------------------------------------
# stage one
# --------------------------------------------------------------------------

def train_stage1(dataset: list[Story], cfg: TrainConfig, model_config: ModelConfig,
                 sched: NoiseSchedule | None = None,
                 loss_log: list | None = None,
                 freeze_to_self_attention: bool = False,
                 init: Checkpoint | None = None) -> Checkpoint:
    """Train the base network on (image, caption) pairs with the diffusion loss.

    By default every parameter trains, since no pretrained base exists at this
    scale. freeze_to_self_attention restricts training to the self-attention
    layers, the strict partition for runs that start from a provided base
    checkpoint (pass it as `init`).
    """
    if cfg.stage != "single_frame":
        raise ValueError("train_stage1 requires stage 'single_frame'")
    frames = [(f.image, f.caption) for story in dataset for f in story.frames]
    if not frames:
        raise ValueError("dataset is empty")
    sched = sched or make_schedule(1000)
    if init is not None:
        if replace(init.model_config, context_enabled=False) != \
                replace(model_config, context_enabled=False):
            raise ValueError("init checkpoint's model config does not match")
        sched = init.schedule
        model = model_from_checkpoint(init, context_enabled=False, strict=False,
                                      init_seed=cfg.seed)
    else:
        torch.manual_seed(cfg.seed)
        model = StoryUNet(replace(model_config, context_enabled=False))
    if freeze_to_self_attention:
        trainable = []
        for group, entries in model.parameter_groups().items():
            for p in entries.values():
                if group == "self_attention":
                    trainable.append(p)
                else:
                    p.requires_grad_(False)
    else:
        trainable = list(model.parameters())
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)

    for _ in range(cfg.iterations):
        idx = torch.randint(0, len(frames), (cfg.batch_size,), generator=g)
        batch = [Triplet(target=frames[i][0], prompt=frames[i][1], refs=())
                 for i in idx.tolist()]
        batch = drop_conditions(batch, cfg.p_text_drop, 0.0, g)
        _train_step(model, opt, batch, [None] * len(batch), sched, g, loss_log)

    return checkpoint_from_model(model, sched, cfg.stage, cfg.iterations, g)


# --------------------------------------------------------------------------
# stage two
# --------------------------------------------------------------------------

def train_stage2(ckpt: Checkpoint, dataset: list[Story], cfg: TrainConfig,
                 loss_log: list | None = None) -> Checkpoint:
    """Train image cross-attention (and null conditions) with all else frozen."""
    if cfg.stage not in ("multi_frame_1ref", "multi_frame_Nref"):
        raise ValueError("train_stage2 requires a multi-frame stage")
    expected_prev = "single_frame" if cfg.stage == "multi_frame_1ref" else "multi_frame_1ref"
    if ckpt.stage != expected_prev:
        raise ValueError(f"stage {cfg.stage} must start from a {expected_prev} "
                         f"checkpoint, got {ckpt.stage!r}")
    pairs = [(story, k) for story in dataset for k in range(1, len(story))]
    if not pairs:
        raise ValueError("dataset holds no frames with preceding context")

    sched = ckpt.schedule
    model = model_from_checkpoint(ckpt, context_enabled=True, strict=False,
                                  init_seed=cfg.seed)
    groups = model.parameter_groups()
    if not groups["image_cross_attention"]:
        raise ValueError("model has no image cross-attention layers to train")
    trainable = []
    for group, entries in groups.items():
        for p in entries.values():
            if group in FROZEN_STAGE2_GROUPS:
                p.requires_grad_(False)
            else:
                trainable.append(p)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)

    for _ in range(cfg.iterations):
        idx = torch.randint(0, len(pairs), (cfg.batch_size,), generator=g)
        batch = [sample_triplet(story, k, window=cfg.window)
                 for story, k in (pairs[i] for i in idx.tolist())]
        batch = drop_conditions(batch, cfg.p_text_drop, cfg.p_ctx_drop, g)
        t = torch.randint(0, sched.T, (len(batch),), generator=g)
        contexts = _extract_training_contexts(model, sched, batch, t, g)
        _train_step(model, opt, batch, contexts, sched, g, loss_log, t=t)

    return checkpoint_from_model(model, sched, cfg.stage, cfg.iterations, g)


@dataclass(frozen=True)
class ReconTrainConfig:
    """Self-supervised reconstruction fine-tuning: the image cross-attention
    branch learns to rebuild a frame from its prompt plus an augmented-object
    collage, with every other parameter group frozen."""

    learning_rate: float = 1e-3
    batch_size: int = 16
    iterations: int = 600
    p_text_drop: float = 0.05
    p_ctx_drop: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("invalid reconstruction training config")


def train_reconstruction(ckpt: Checkpoint, dataset: list[Story],
                         cfg: ReconTrainConfig,
                         loss_log: list | None = None) -> Checkpoint:
    """Fine-tune image cross-attention on reconstruction pairs.

    Each sample asks the model to reconstruct a frame given one caption
    candidate and a neutral-background collage of its augmented protagonist,
    labeled with the object category. References carry equal (nearest-frame)
    extraction noise since they have no temporal order.
    """
    from .data import make_recon_pair, parse_description, protagonist_mask

    if ckpt.stage != "single_frame":
        raise ValueError(f"reconstruction fine-tuning starts from a single_frame "
                         f"checkpoint, got {ckpt.stage!r}")
    frames = [f for story in dataset for f in story.frames]
    if not frames:
        raise ValueError("dataset is empty")
    sched = ckpt.schedule
    model = model_from_checkpoint(ckpt, context_enabled=True, strict=False,
                                  init_seed=cfg.seed)
    trainable = []
    for group, entries in model.parameter_groups().items():
        for p in entries.values():
            if group in FROZEN_STAGE2_GROUPS:
                p.requires_grad_(False)
            else:
                trainable.append(p)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)

    for _ in range(cfg.iterations):
        idx = torch.randint(0, len(frames), (cfg.batch_size,), generator=g)
        aug = np.random.default_rng(int(torch.randint(0, 2 ** 31, (1,), generator=g)))
        batch = []
        for i in idx.tolist():
            frame = frames[i]
            mask = protagonist_mask(frame.image)
            if not mask.any():
                continue
            label = parse_description(frame.caption)["shape"] or "circle"
            pair = make_recon_pair(frame.image, [(mask, label)], aug,
                                   [frame.caption, frame.narration])
            batch.append(Triplet(target=pair.target, prompt=pair.prompt,
                                 refs=((pair.references[0], pair.reference_text),)))
        batch = drop_conditions(batch, cfg.p_text_drop, cfg.p_ctx_drop, g)
        t = torch.randint(0, sched.T, (len(batch),), generator=g)
        contexts = _extract_training_contexts(model, sched, batch, t, g)
        _train_step(model, opt, batch, contexts, sched, g, loss_log, t=t)

    return checkpoint_from_model(model, sched, "reconstruction", cfg.iterations, g)


def _extract_training_contexts(model, sched, batch, t, g):
    """Batched, gradient-free context extraction for one training step."""
    jobs = []  # (sample, ref distance i, image, caption, t')
    for s, tr in enumerate(batch):
        if tr.refs is None:
            continue
        for i, (img, caption) in enumerate(tr.refs, start=1):
            jobs.append((s, i, img, caption, context_timestep(int(t[s]), i, sched)))
    contexts: list = [NULL_CONTEXT] * len(batch)
    if not jobs:
        return contexts
    images = torch.stack([torch.from_numpy(j[2]) for j in jobs])
    t_primes = torch.tensor([j[4] for j in jobs])
    eps = torch.randn(images.shape, generator=g, dtype=images.dtype)
    noised = add_noise(images, eps, t_primes, sched)
    with torch.no_grad():
        texts = [model.encode_text(j[3]) for j in jobs]
        _, pyramids = model.denoise_batch(noised, t_primes, texts,
                                          contexts=[None] * len(jobs),
                                          capture_features=True)
    parts: dict[int, list] = {}
    for (s, i, _, _, tp), pyr in zip(jobs, pyramids):
        parts.setdefault(s, []).append(pyramid_to_context(pyr, index=i, timestep=tp))
    for s, ps in parts.items():
        contexts[s] = concat_contexts(ps)
    return contexts


def _train_step(model, opt, batch, contexts, sched, g, loss_log, t=None):
    x0 = torch.stack([torch.from_numpy(tr.target) for tr in batch])
    if t is None:
        t = torch.randint(0, sched.T, (len(batch),), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, sched)
    texts = [model.encode_text(tr.prompt) if tr.prompt is not None else NULL_TEXT
             for tr in batch]
    pred, _ = model.denoise_batch(x_t, t, texts, contexts)
    loss = training_loss(eps, pred)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"loss became non-finite: {float(loss.detach())!r}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    if loss_log is not None:
        loss_log.append(float(loss.detach()))


# --------------------------------------------------------------------------
# paired validation
# --------------------------------------------------------------------------

def context_validation_losses(model: StoryUNet, sched: NoiseSchedule,
                              stories: list[Story], window: int = 3,
                              n_samples: int = 32, seed: int = 7) -> tuple[float, float]:
    """Paired denoising losses on held-out triplets: with extracted context
    versus with the context dropped to null. Noise, timesteps and triplets
    are identical across the two arms."""
    pairs = [(story, k) for story in stories for k in range(1, len(story))]
    if not pairs:
        raise ValueError("no triplets available")
    g = torch.Generator().manual_seed(seed)
    sel = [pairs[i] for i in torch.randint(0, len(pairs), (n_samples,), generator=g).tolist()]
    loss_ctx, loss_null = [], []
    with torch.no_grad():
        for story, k in sel:
            tr = sample_triplet(story, k, window=window)
            t = int(torch.randint(0, sched.T, (1,), generator=g))
            x0 = torch.from_numpy(tr.target)
            eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
            x_t = add_noise(x0, eps, t, sched)
            text = model.encode_text(tr.prompt)
            ctx = extract_context([(torch.from_numpy(img), cap) for img, cap in tr.refs],
                                  t, model, sched, g)
            pred_ctx = model.denoise(x_t, t, text, ctx)
            pred_null = model.denoise(x_t, t, text, NULL_CONTEXT)
            loss_ctx.append(float(training_loss(eps, pred_ctx)))
            loss_null.append(float(training_loss(eps, pred_null)))
    return float(np.mean(loss_ctx)), float(np.mean(loss_null))
