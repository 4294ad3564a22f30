"""Story containers and image/manifest serialization.

A Story is an ordered list of frames, each holding an image, a descriptive
caption ("a red striped circle in the forest") and a story-form narration.
Images are float32 arrays of shape [3, H, W] with values in [-1, 1]; they
are written to disk as 8-bit RGB PNGs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


@dataclass
class StoryFrame:
    image: np.ndarray
    caption: str
    narration: str
    index: int


@dataclass
class Story:
    frames: list[StoryFrame] = field(default_factory=list)

    def __post_init__(self):
        for want, frame in enumerate(self.frames):
            if frame.index != want:
                raise ValueError("frame indices must be contiguous from 0")
            if not frame.caption:
                raise ValueError("captions must be non-empty")

    def __len__(self):
        return len(self.frames)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float [3, H, W] -> uint8 [H, W, 3], clamping out-of-range values."""
    arr = np.clip(image, -1.0, 1.0)
    arr = ((arr + 1.0) * 127.5).round().astype(np.uint8)
    return arr.transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def save_image(path: Path | str, image: np.ndarray):
    PILImage.fromarray(to_uint8(image), mode="RGB").save(path)


def load_image(path: Path | str) -> np.ndarray:
    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_corpus(stories: list[Story], out_dir: Path | str,
                splits: list[str] | None = None) -> Path:
    """Write frame PNGs plus the corpus manifest; returns the manifest path.

    The manifest is a JSON list of stories, each with a split tag and
    per-frame {file, caption, narration} records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = ["train"] * len(stories)
    if len(splits) != len(stories):
        raise ValueError("one split tag per story is required")
    records = []
    for s, (story, split) in enumerate(zip(stories, splits)):
        frames = []
        for frame in story.frames:
            fname = f"story_{s:04d}_frame_{frame.index:02d}.png"
            save_image(out_dir / fname, frame.image)
            frames.append({"file": fname, "caption": frame.caption,
                           "narration": frame.narration})
        records.append({"id": s, "split": split, "frames": frames})
    manifest = out_dir / "corpus.json"
    manifest.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir: Path | str, split: str | None = None) -> list[Story]:
    """Load stories from a corpus directory, optionally filtered by split."""
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "corpus.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    records = json.loads(manifest.read_text())
    stories = []
    for rec in records:
        if split is not None and rec.get("split", "train") != split:
            continue
        frames = []
        for k, fr in enumerate(rec["frames"]):
            frames.append(StoryFrame(image=load_image(corpus_dir / fr["file"]),
                                     caption=fr["caption"],
                                     narration=fr.get("narration", fr["caption"]),
                                     index=k))
        stories.append(Story(frames=frames))
    return stories
