"""Command-line entry point: corpus synthesis, preparation, training,
generation, continuation, evaluation, and the reproduction suite.

Exit codes: 0 success, 1 usage error, 2 data or contract error. Every
subcommand writes a run.json provenance record next to its outputs. All
randomness is controlled by --seed; no subcommand touches the network.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import SynthSpec, load_episode, prepare_episode
from .guidance import GuidanceConfig
from .inference import InferenceConfig, continue_story, generate_story
from .metrics import (FeatureSet, embed_images, embed_texts, frechet_distance,
                      pair_similarity, toy_embed)
from .model import ModelConfig
from .profiles import (toy_inference_config, toy_model_config, toy_schedule,
                       toy_train_config)
from .stories import load_corpus, load_image, save_corpus, save_image
from .training import (TrainingDiverged, load_checkpoint, model_from_checkpoint,
                       save_checkpoint, train_stage1, train_stage2)

logger = logging.getLogger("storydiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging(mode: str):
    handler = logging.StreamHandler()
    if mode == "json":
        class JsonFormatter(logging.Formatter):
            def format(self, record):
                return json.dumps({"level": record.levelname,
                                   "name": record.name,
                                   "message": record.getMessage()})
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def _config_hash(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_run_record(out: Path, command: str, args: argparse.Namespace,
                      payload, started: float):
    out = Path(out)
    target = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "config_hash": _config_hash(payload),
        "versions": {
            "storydiff": __version__,
            "python": sys.version.split()[0],
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "wall_seconds": round(time.time() - started, 3),
    }
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------- run config

_CONFIG_SECTIONS = {"model", "train", "inference"}


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    unknown = set(data) - _CONFIG_SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for section, cls in (("model", ModelConfig), ("inference", InferenceConfig)):
        if section in data:
            allowed = set(cls.__dataclass_fields__)
            bad = set(data[section]) - allowed
            if bad:
                raise ValueError(f"unknown keys in config section {section!r}: {sorted(bad)}")
    if "train" in data:
        from .training import TrainConfig
        allowed = set(TrainConfig.__dataclass_fields__) - {"stage"}
        bad = set(data["train"]) - allowed
        if bad:
            raise ValueError(f"unknown keys in config section 'train': {sorted(bad)}")
    return data


def _model_config_from(run_cfg: dict) -> ModelConfig:
    base = toy_model_config()
    overrides = dict(run_cfg.get("model", {}))
    if "vocab" in overrides:
        overrides["vocab"] = tuple(overrides["vocab"])
    if overrides.get("attention_levels") is not None and "attention_levels" in overrides:
        overrides["attention_levels"] = tuple(overrides["attention_levels"])
    return replace(base, **overrides) if overrides else base


# --------------------------------------------------------------- subcommands

def _cmd_synth(args) -> int:
    started = time.time()
    spec = SynthSpec(n_stories=args.stories, min_frames=args.min_frames,
                     max_frames=args.max_frames, image_size=args.image_size,
                     seed=args.seed)
    from .data import synth_stories
    stories = synth_stories(spec)
    n_test = math.ceil(args.test_fraction * len(stories))
    splits = ["train"] * (len(stories) - n_test) + ["test"] * n_test
    out = Path(args.out)
    save_corpus(stories, out, splits)
    logger.info("wrote %d stories (%d test) to %s", len(stories), n_test, out)
    _write_run_record(out, "synth", args, asdict(spec), started)
    return 0


def _cmd_prepare(args) -> int:
    started = time.time()
    episode = load_episode(args.episode)
    story = prepare_episode(episode, args.images, toy_embed,
                            dedup_threshold=args.dedup_threshold)
    out = Path(args.out)
    save_corpus([story], out)
    logger.info("prepared %d frames to %s", len(story), out)
    _write_run_record(out, "prepare", args,
                      {"episode": args.episode, "threshold": args.dedup_threshold},
                      started)
    return 0


def _cmd_train(args) -> int:
    started = time.time()
    run_cfg = _load_run_config(args.config)
    stage = {"1": "single_frame", "2a": "multi_frame_1ref", "2b": "multi_frame_Nref"}[args.stage]
    cfg = toy_train_config(stage, seed=args.seed)
    overrides = dict(run_cfg.get("train", {}))
    for field in ("iterations", "batch_size", "learning_rate"):
        val = getattr(args, field)
        if val is not None:
            overrides[field] = val
    if overrides:
        cfg = replace(cfg, **overrides)
    stories = load_corpus(args.data, split="train")
    if not stories:
        raise ValueError(f"no training stories found under {args.data}")

    if stage == "single_frame":
        model_cfg = _model_config_from(run_cfg)
        init = load_checkpoint(args.init) if args.init else None
        ckpt = train_stage1(stories, cfg, model_cfg, toy_schedule(),
                            freeze_to_self_attention=args.freeze_to_self_attn,
                            init=init)
    else:
        if args.init is None:
            raise ValueError(f"--stage {args.stage} requires --init with the "
                             "previous stage's checkpoint")
        prev = load_checkpoint(args.init)
        ckpt = train_stage2(prev, stories, cfg)
    save_checkpoint(ckpt, args.out)
    logger.info("stage %s finished after %d iterations -> %s",
                args.stage, cfg.iterations, args.out)
    _write_run_record(Path(args.out), "train", args,
                      {"train": asdict(cfg), "stage": stage}, started)
    return 0


def _inference_config_from(args, run_cfg: dict) -> InferenceConfig:
    cfg = toy_inference_config(seed=args.seed)
    overrides = dict(run_cfg.get("inference", {}))
    if args.steps is not None:
        overrides["ddim_steps"] = args.steps
    if args.candidates is not None:
        overrides["candidates_per_frame"] = args.candidates
    if args.window is not None:
        overrides["window"] = args.window
    overrides["seed"] = args.seed
    overrides["select_in_loop"] = not args.no_select_in_loop
    guidance = GuidanceConfig(w_v=args.guidance_visual, w_t=args.guidance_text)
    if "guidance" in overrides:
        guidance = GuidanceConfig(**overrides.pop("guidance"))
    return replace(cfg, guidance=guidance, **overrides)


def _read_storyline(path: str) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    storyline = [ln for ln in lines if ln]
    if not storyline:
        raise ValueError(f"storyline file {path} holds no prompts")
    return storyline


def _write_story_outputs(story, report, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for frame in story.frames:
        save_image(out / f"frame_{frame.index:03d}.png", frame.image)
    manifest = {"frames": [{"file": f"frame_{f.index:03d}.png",
                            "prompt": f.caption} for f in story.frames],
                "selection": report}
    (out / "story.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _cmd_generate(args) -> int:
    started = time.time()
    run_cfg = _load_run_config(args.config)
    cfg = _inference_config_from(args, run_cfg)
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    out = Path(args.out)
    if args.from_corpus:
        from .inference import generate_test_frames
        stories = load_corpus(args.from_corpus, split=args.split)
        if not stories:
            raise ValueError(f"no stories with split {args.split!r} under {args.from_corpus}")
        generated = generate_test_frames(stories, cfg, model, ckpt.schedule,
                                         teacher_forced=not args.auto_regressive,
                                         prompt_field=args.prompt_field)
        save_corpus(generated, out)
        logger.info("regenerated %d stories (%s) to %s", len(generated),
                    "auto-regressive" if args.auto_regressive else "teacher-forced",
                    out)
    else:
        if not args.story:
            raise ValueError("either --story or --from-corpus is required")
        storyline = _read_storyline(args.story)
        report: list = []
        story = generate_story(storyline, cfg, model, ckpt.schedule, report=report)
        _write_story_outputs(story, report, out)
        logger.info("generated %d frames to %s", len(story), out)
    _write_run_record(out, "generate", args, {"inference": str(cfg)}, started)
    return 0


def _cmd_continue(args) -> int:
    started = time.time()
    run_cfg = _load_run_config(args.config)
    cfg = _inference_config_from(args, run_cfg)
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    ref = load_image(args.ref)
    storyline = _read_storyline(args.story)
    report: list = []
    story = continue_story(ref, args.ref_caption, storyline, cfg, model,
                           ckpt.schedule, report=report)
    out = Path(args.out)
    _write_story_outputs(story, report, out)
    logger.info("continued story with %d frames to %s", len(story), out)
    _write_run_record(out, "continue", args, {"inference": str(cfg)}, started)
    return 0


def _load_extractor(spec: str):
    if spec == "toy":
        return None
    if spec.startswith("plugin:"):
        target = spec[len("plugin:"):]
        module_name, _, attr = target.rpartition(":")
        if not module_name:
            raise ValueError("plugin extractor must be plugin:<module>:<attribute>")
        fn = getattr(importlib.import_module(module_name), attr)
        if not hasattr(fn, "extractor_id"):
            fn.extractor_id = target
        return fn
    raise ValueError(f"unknown extractor: {spec!r}")


def _load_image_dir(path: str) -> list[np.ndarray]:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise ValueError(f"no PNG files under {path}")
    return [load_image(f) for f in files]


def _cmd_eval(args) -> int:
    started = time.time()
    extractor = _load_extractor(args.extractor)
    preds = embed_images(_load_image_dir(args.pred), extractor)
    if args.metric == "fid":
        refs = embed_images(_load_image_dir(args.ref), extractor)
        value, n = frechet_distance(preds, refs), preds.n
    elif args.metric in ("clip_i", "consistency"):
        if args.pairing == "sequential":
            a = FeatureSet(preds.vectors[:-1], preds.extractor_id)
            b = FeatureSet(preds.vectors[1:], preds.extractor_id)
        else:
            refs = embed_images(_load_image_dir(args.ref), extractor)
            a, b = preds, refs
        value, n = pair_similarity(a, b), a.n
    elif args.metric == "clip_t":
        if args.captions is None:
            raise ValueError("--metric clip_t requires --captions")
        texts = embed_texts([ln for ln in Path(args.captions).read_text().splitlines()
                             if ln.strip()], extractor)
        value, n = pair_similarity(preds, texts), preds.n
    else:
        raise ValueError(f"unknown metric {args.metric!r}")
    report = {"metric": args.metric, "value": value, "n": n,
              "extractor_id": preds.extractor_id}
    print(json.dumps(report, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
        _write_run_record(out, "eval", args, report, started)
    return 0


def _cmd_repro(args) -> int:
    started = time.time()
    if args.suite != "acceptance":
        raise ValueError(f"unknown suite {args.suite!r}")
    from .acceptance import run_acceptance
    out = Path(args.out)
    cache = Path(args.cache_dir) if args.cache_dir else out
    criteria = None
    if args.criteria:
        criteria = [int(c) for c in args.criteria.split(",")]
    results = run_acceptance(cache, criteria=criteria, fresh=args.fresh)
    report_path = cache / "acceptance_report.json"
    if out != cache:
        out.mkdir(parents=True, exist_ok=True)
        (out / "acceptance_report.json").write_text(report_path.read_text())
    print(report_path.read_text())
    _write_run_record(out, "repro", args, {"suite": args.suite}, started)
    return 0 if all(r.passed for r in results) else 2


# ------------------------------------------------------------------- parser

def build_parser() -> _Parser:
    p = _Parser(prog="storydiff",
                description="Visual storytelling with context-conditioned diffusion")
    p.add_argument("--log", choices=("text", "json"), default="text")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic story corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stories", type=int, default=200)
    sp.add_argument("--min-frames", type=int, default=4)
    sp.add_argument("--max-frames", type=int, default=8)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.1)
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("prepare", help="dedup and align a raw episode")
    sp.add_argument("--episode", required=True, help="episode manifest JSON")
    sp.add_argument("--images", required=True, help="directory of frame PNGs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dedup-threshold", type=float, default=0.9)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_prepare)

    sp = sub.add_parser("train", help="run one training stage")
    sp.add_argument("--stage", choices=("1", "2a", "2b"), required=True)
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--out", required=True, help="output checkpoint path")
    sp.add_argument("--init", help="previous stage checkpoint (stages 2a/2b), "
                                   "or a base checkpoint for stage 1")
    sp.add_argument("--freeze-to-self-attn", action="store_true",
                    help="stage 1 strict mode: train only self-attention layers")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--learning-rate", type=float)
    sp.set_defaults(fn=_cmd_train)

    def add_gen_flags(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--candidates", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--guidance-visual", type=float, default=7.0)
        sp.add_argument("--guidance-text", type=float, default=3.5)
        sp.add_argument("--no-select-in-loop", action="store_true")

    sp = sub.add_parser("generate", help="generate a story from prompts")
    sp.add_argument("--story", help="text file, one prompt per line")
    sp.add_argument("--from-corpus", help="regenerate a corpus split instead "
                                          "of reading --story")
    sp.add_argument("--split", default="test")
    sp.add_argument("--auto-regressive", action="store_true",
                    help="chain generated frames instead of teacher-forcing "
                         "on ground-truth history")
    sp.add_argument("--prompt-field", choices=("caption", "narration"),
                    default="caption")
    add_gen_flags(sp)
    sp.set_defaults(fn=_cmd_generate)

    sp = sub.add_parser("continue", help="continue a story from a reference image")
    sp.add_argument("--ref", required=True, help="reference PNG")
    sp.add_argument("--ref-caption", required=True)
    sp.add_argument("--story", required=True)
    add_gen_flags(sp)
    sp.set_defaults(fn=_cmd_continue)

    sp = sub.add_parser("eval", help="compute a metric over image directories")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref")
    sp.add_argument("--metric", choices=("fid", "clip_i", "clip_t", "consistency"),
                    required=True)
    sp.add_argument("--extractor", default="toy")
    sp.add_argument("--pairing", choices=("gt", "sequential"), default="gt")
    sp.add_argument("--captions")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("repro", help="run the reproduction suite")
    sp.add_argument("--suite", default="acceptance")
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache-dir", help="reuse training artifacts from here")
    sp.add_argument("--fresh", action="store_true", help="ignore cached artifacts")
    sp.add_argument("--criteria", help="comma-separated subset, e.g. 1,2,8")
    sp.set_defaults(fn=_cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    _setup_logging(args.log)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError, TrainingDiverged) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
