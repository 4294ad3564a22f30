"""Corpus construction and dataset-preparation algorithms.

Two halves live here. The synthetic "shape stories" generator renders a
desk-scale training corpus where one protagonist (a colored, textured shape)
travels through muted scene backgrounds; its rendering is identical across
the frames of a story up to translation, so character consistency is exactly
checkable downstream. The second half implements the preparation pipeline
for real episode data: embedding-based near-duplicate removal, dynamic time
warping of subtitles onto frame timestamps, and text-region erasure.

Protagonists deliberately carry visual detail the caption never mentions
(an accent color, the sprite size, the stripe orientation): captions pin
{color, texture, shape, scene} only, so preceding frames stay informative
for conditional generation even when the caption is present. Narrations
are the story-form texts; they omit the color word and reuse only caption
vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stories import Story, StoryFrame, load_image

SHAPES = ("circle", "square", "triangle")
TEXTURES = ("solid", "striped")
COLORS = {
    "red": (0.90, 0.12, 0.12),
    "orange": (0.92, 0.52, 0.10),
    "yellow": (0.92, 0.88, 0.12),
    "green": (0.12, 0.78, 0.20),
    "blue": (0.15, 0.32, 0.90),
    "purple": (0.58, 0.16, 0.85),
}
SCENES = {
    "forest": (0.24, 0.28, 0.25),
    "desert": (0.42, 0.40, 0.37),
    "ocean": (0.25, 0.28, 0.31),
    "mountain": (0.33, 0.33, 0.35),
    "meadow": (0.30, 0.33, 0.28),
}
# protagonist center per scene, (row, col) on the default 32x32 canvas
SCENE_ANCHORS = {
    "forest": (9, 9),
    "desert": (9, 22),
    "ocean": (16, 16),
    "mountain": (22, 9),
    "meadow": (22, 22),
}
SPRITE_SIZES = (9, 11, 13)
STRIPE_ORIENTATIONS = ("h", "v", "d")

CAPTION_TEMPLATE = "a {color} {texture} {shape} in the {scene}"
NARRATION_TEMPLATE = "the {texture} {shape} in the {scene}"


def default_vocab() -> tuple[str, ...]:
    words: list[str] = []
    for w in ("a", "the", "in") + SHAPES + TEXTURES + tuple(COLORS) + tuple(SCENES):
        if w not in words:
            words.append(w)
    return tuple(words)


@dataclass(frozen=True)
class SynthSpec:
    n_stories: int
    min_frames: int = 4
    max_frames: int = 8
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_stories < 1 or self.min_frames < 1 or self.max_frames < self.min_frames:
            raise ValueError("invalid synthesis spec")


@dataclass(frozen=True)
class Protagonist:
    shape: str
    color: str
    texture: str
    accent: str
    size: int
    orientation: str


def _shape_mask(shape: str, size: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    mid = (size - 1) / 2.0
    if shape == "circle":
        return (rr - mid) ** 2 + (cc - mid) ** 2 <= (size / 2.0 - 0.3) ** 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        return np.abs(cc - mid) <= rr / 2.0
    raise ValueError(f"unknown shape: {shape!r}")


def render_sprite(p: Protagonist) -> tuple[np.ndarray, np.ndarray]:
    """Sprite pixels [3, S, S] in [0, 1] plus its boolean mask."""
    mask = _shape_mask(p.shape, p.size)
    rr, cc = np.mgrid[0:p.size, 0:p.size]
    primary = np.array(COLORS[p.color], dtype=np.float32)
    accent = np.array(COLORS[p.accent], dtype=np.float32)
    sprite = np.zeros((3, p.size, p.size), dtype=np.float32)
    sprite[:] = primary[:, None, None]
    if p.texture == "striped":
        sel = {"h": rr, "v": cc, "d": rr + cc}[p.orientation]
        stripe = (sel // 2) % 2 == 1
        sprite[:, stripe] = accent[:, None]
    else:
        core = np.zeros_like(mask)
        inner = _shape_mask(p.shape, max(p.size // 2, 3))
        off = (p.size - inner.shape[0]) // 2
        core[off:off + inner.shape[0], off:off + inner.shape[1]] = inner
        sprite[:, core & mask] = accent[:, None]
    return sprite, mask


def render_scene(scene: str, image_size: int) -> np.ndarray:
    """Muted scene background [3, H, W] in [0, 1]; brightness-only patterns."""
    base = np.array(SCENES[scene], dtype=np.float32)
    img = np.ones((3, image_size, image_size), dtype=np.float32) * base[:, None, None]
    rr, cc = np.mgrid[0:image_size, 0:image_size]
    if scene == "forest":
        mod = np.where((cc // 4) % 2 == 0, 1.08, 0.92)
    elif scene == "desert":
        mod = np.where((rr // 4) % 2 == 0, 1.08, 0.92)
    elif scene == "ocean":
        mod = 0.88 + 0.24 * rr / max(image_size - 1, 1)
    elif scene == "mountain":
        mod = 0.88 + 0.24 * (rr + cc) / max(2 * image_size - 2, 1)
    elif scene == "meadow":
        mod = np.where((rr % 6 < 2) & (cc % 6 < 2), 1.12, 0.96)
    else:
        raise ValueError(f"unknown scene: {scene!r}")
    return img * mod.astype(np.float32)[None, :, :]


def render_frame(p: Protagonist, scene: str, image_size: int) -> np.ndarray:
    """Compose protagonist over scene; returns [3, H, W] in [-1, 1]."""
    img = render_scene(scene, image_size)
    sprite, mask = render_sprite(p)
    anchor_r, anchor_c = SCENE_ANCHORS[scene]
    scale = image_size / 32.0
    r0 = int(round(anchor_r * scale)) - p.size // 2
    c0 = int(round(anchor_c * scale)) - p.size // 2
    r0 = min(max(r0, 0), image_size - p.size)
    c0 = min(max(c0, 0), image_size - p.size)
    region = img[:, r0:r0 + p.size, c0:c0 + p.size]
    region[:, mask] = sprite[:, mask]
    return img * 2.0 - 1.0


def synth_stories(spec: SynthSpec) -> list[Story]:
    """Deterministic synthetic story corpus; per-story seeds derive from the
    master seed so stories can be generated independently in any order."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_stories)
    return [_synth_story(np.random.default_rng(seeds[s]), spec) for s in range(spec.n_stories)]


def _synth_story(rng: np.random.Generator, spec: SynthSpec) -> Story:
    color = str(rng.choice(list(COLORS)))
    others = [c for c in COLORS if c != color]
    texture = str(rng.choice(TEXTURES))
    p = Protagonist(
        shape=str(rng.choice(SHAPES)),
        color=color,
        texture=texture,
        accent=str(rng.choice(others)),
        size=int(rng.choice(SPRITE_SIZES)),
        orientation=str(rng.choice(STRIPE_ORIENTATIONS)) if texture == "striped" else "h",
    )
    n = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    scenes = list(SCENES)
    frames = []
    prev = None
    for k in range(n):
        pool = [s for s in scenes if s != prev]
        scene = str(rng.choice(pool))
        prev = scene
        sub = {"color": p.color, "texture": p.texture, "shape": p.shape, "scene": scene}
        frames.append(StoryFrame(
            image=render_frame(p, scene, spec.image_size),
            caption=CAPTION_TEMPLATE.format(**sub),
            narration=NARRATION_TEMPLATE.format(**sub),
            index=k,
        ))
    return Story(frames=frames)


def protagonist_mask(image: np.ndarray, threshold: float = 0.35) -> np.ndarray:
    """Saturated-pixel mask; scene palettes stay below the threshold by design."""
    unit = (image + 1.0) / 2.0
    spread = unit.max(axis=0) - unit.min(axis=0)
    return spread > threshold


def parse_description(prompt: str) -> dict:
    """Best-effort extraction of protagonist/scene words from a prompt."""
    words = prompt.lower().split()
    out = {"color": None, "texture": None, "shape": None, "scene": None}
    for w in words:
        if w in COLORS and out["color"] is None:
            out["color"] = w
        elif w in TEXTURES and out["texture"] is None:
            out["texture"] = w
        elif w in SHAPES and out["shape"] is None:
            out["shape"] = w
        elif w in SCENES and out["scene"] is None:
            out["scene"] = w
    return out


def render_prompt_exemplar(prompt: str, image_size: int = 32) -> np.ndarray:
    """Canonical rendering of a prompt, used by the default candidate scorer.

    Missing attributes fall back to fixed defaults, so under-specified
    prompts still produce a deterministic exemplar.
    """
    d = parse_description(prompt)
    p = Protagonist(
        shape=d["shape"] or "circle",
        color=d["color"] or "red",
        texture=d["texture"] or "solid",
        accent=d["color"] or "red",
        size=11,
        orientation="h",
    )
    return render_frame(p, d["scene"] or "forest", image_size)


# --------------------------------------------------------------------------
# preparation pipeline for real episode data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RawEpisode:
    """Key frames with timestamps plus timed subtitles."""

    frames: tuple[tuple[str, float], ...]          # (file, seconds)
    subtitles: tuple[tuple[str, float, float], ...]  # (text, start, end)

    def __post_init__(self):
        times = [t for _, t in self.frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("frame timestamps must be non-decreasing")
        for text, start, end in self.subtitles:
            if end < start:
                raise ValueError(f"subtitle interval reversed: {text!r}")


def load_episode(manifest_path: Path | str) -> RawEpisode:
    data = json.loads(Path(manifest_path).read_text())
    frames = tuple((f["file"], float(f["t"])) for f in data["frames"])
    subs = tuple((s["text"], float(s["start"]), float(s["end"])) for s in data["subtitles"])
    return RawEpisode(frames=frames, subtitles=subs)


def dedup_frames(features, threshold: float) -> list[int]:
    """Keep one frame per group of near-duplicates.

    features: L2-normalized embedding per frame. Frames whose cosine
    similarity reaches the threshold are linked; within each connected
    component only the lowest index survives. Output is ascending.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("features must be a non-empty [n, d] array")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    norms = np.linalg.norm(feats, axis=1)
    bad = np.abs(norms - 1.0) > 1e-4
    if bad.any():
        raise ValueError(f"features must be unit-norm; offending indices {np.nonzero(bad)[0].tolist()}")
    n = feats.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    cos = feats @ feats.T
    for i in range(n):
        for j in range(i + 1, n):
            if cos[i, j] >= threshold:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    keep = sorted({find(i) for i in range(n)})
    return keep


def dtw_align(frame_times, subtitles) -> list[tuple[int, int]]:
    """Monotone minimal-cost alignment of frames to subtitle intervals.

    Cost c(i, j) = |frame_times[i] - midpoint(subtitles[j])|, step set
    {(1,0), (0,1), (1,1)}, endpoints matched. Returns the optimal warping
    path as (frame_index, subtitle_index) pairs; ties prefer the diagonal.
    """
    times = [float(t) for t in frame_times]
    mids = [(float(s) + float(e)) / 2.0 for s, e in subtitles]
    if not times or not mids:
        raise ValueError("both sequences must be non-empty")
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("frame_times must be sorted")
    if any(b < a for a, b in zip(mids, mids[1:])):
        raise ValueError("subtitles must be sorted")
    n, m = len(times), len(mids)
    cost = np.abs(np.asarray(times)[:, None] - np.asarray(mids)[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1),
                   (acc[i - 1, j], i - 1, j),
                   (acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def dtw_cost(frame_times, subtitles) -> float:
    """Total cost of the optimal warping path."""
    path = dtw_align(frame_times, subtitles)
    mids = [(float(s) + float(e)) / 2.0 for s, e in subtitles]
    return float(sum(abs(float(frame_times[i]) - mids[j]) for i, j in path))


def erase_regions(image: np.ndarray, boxes, mode: str = "mean_fill") -> np.ndarray:
    """Replace pixels inside rectangular boxes; everything outside is untouched.

    Boxes are (row0, col0, row1, col1), half-open. mean_fill paints the box
    with its own per-channel mean; border_blend interpolates bilinearly from
    the pixels just outside the box edges.
    """
    if mode not in ("mean_fill", "border_blend"):
        raise ValueError(f"unknown erase mode: {mode!r}")
    out = image.copy()
    _, h, w = image.shape
    for r0, c0, r1, c1 in boxes:
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise ValueError(f"box {(r0, c0, r1, c1)} outside image bounds {(h, w)}")
        if mode == "mean_fill":
            region_mean = image[:, r0:r1, c0:c1].mean(axis=(1, 2))
            out[:, r0:r1, c0:c1] = region_mean[:, None, None]
        else:
            top = image[:, max(r0 - 1, 0), c0:c1]
            bottom = image[:, min(r1, h - 1), c0:c1]
            left = image[:, r0:r1, max(c0 - 1, 0)]
            right = image[:, r0:r1, min(c1, w - 1)]
            ar = np.linspace(0.0, 1.0, r1 - r0, dtype=image.dtype)[None, :, None]
            ac = np.linspace(0.0, 1.0, c1 - c0, dtype=image.dtype)[None, None, :]
            vert = top[:, None, :] * (1 - ar) + bottom[:, None, :] * ar
            horiz = left[:, :, None] * (1 - ac) + right[:, :, None] * ac
            out[:, r0:r1, c0:c1] = (vert + horiz) / 2.0
    return out


@dataclass(frozen=True)
class ReconPair:
    """Self-supervised reconstruction sample built from one image."""

    references: tuple[np.ndarray, ...]
    reference_text: str
    prompt: str
    target: np.ndarray


def make_recon_pair(image: np.ndarray, object_masks, rng: np.random.Generator,
                    captions, variant: str = "single", max_shift: int = 4,
                    rotations: tuple[int, ...] = (0, 90, 180, 270)) -> ReconPair:
    """Build a reconstruction pair: augmented object collage(s) -> original.

    object_masks: list of (bool mask [H, W], category label). The single
    variant collages every augmented object onto one neutral canvas; the
    multi variant emits one reference canvas per object. reference_text and
    prompt are drawn from the labels and caption candidates respectively.
    """
    if variant not in ("single", "multi"):
        raise ValueError(f"unknown variant: {variant!r}")
    masks = list(object_masks)
    if not masks:
        raise ValueError("object_masks must be non-empty")
    captions = list(captions)
    if not captions:
        raise ValueError("captions must be non-empty")
    counts = np.zeros(image.shape[1:], dtype=np.int32)
    for mask, _ in masks:
        counts += mask.astype(np.int32)
    if counts.max() > 1:
        raise ValueError("object masks must be disjoint")

    _, h, w = image.shape
    canvases = []
    canvas = np.zeros_like(image)
    for mask, _ in masks:
        if variant == "multi":
            canvas = np.zeros_like(image)
        rows, cols = np.nonzero(mask)
        r0, r1 = rows.min(), rows.max() + 1
        c0, c1 = cols.min(), cols.max() + 1
        patch = image[:, r0:r1, c0:c1]
        sub = mask[r0:r1, c0:c1]
        k = int(rng.integers(0, len(rotations)))
        turns = (rotations[k] // 90) % 4
        patch = np.rot90(patch, turns, axes=(1, 2)).copy()
        sub = np.rot90(sub, turns).copy()
        ph, pw = sub.shape
        br = min(max(r0 + int(rng.integers(-max_shift, max_shift + 1)), 0), h - ph)
        bc = min(max(c0 + int(rng.integers(-max_shift, max_shift + 1)), 0), w - pw)
        region = canvas[:, br:br + ph, bc:bc + pw]
        region[:, sub] = patch[:, sub]
        if variant == "multi":
            canvases.append(canvas)
    if variant == "single":
        canvases.append(canvas)

    labels = [label for _, label in masks]
    reference_text = str(labels[int(rng.integers(0, len(labels)))])
    prompt = str(captions[int(rng.integers(0, len(captions)))])
    return ReconPair(references=tuple(canvases), reference_text=reference_text,
                     prompt=prompt, target=image)


def prepare_episode(episode: RawEpisode, images_dir: Path | str, embed_fn,
                    dedup_threshold: float = 0.9) -> Story:
    """Episode manifest -> deduplicated, subtitle-aligned story.

    embed_fn maps an image array to a unit-norm feature vector. Subtitles
    aligned to a surviving frame are joined in order to form its text; the
    caption defaults to the narration (descriptive captioning is an external
    plug-in boundary).
    """
    images_dir = Path(images_dir)
    images = [load_image(images_dir / f) for f, _ in episode.frames]
    feats = np.stack([embed_fn(img) for img in images])
    keep = dedup_frames(feats, dedup_threshold)
    times = [episode.frames[i][1] for i in keep]
    if not episode.subtitles:
        raise ValueError("episode has no subtitles to align")
    intervals = [(s, e) for _, s, e in episode.subtitles]
    path = dtw_align(times, intervals)
    texts: dict[int, list[str]] = {i: [] for i in range(len(keep))}
    for fi, sj in path:
        texts[fi].append(episode.subtitles[sj][0])
    frames = []
    for new_idx, orig_idx in enumerate(keep):
        text = " ".join(texts[new_idx]).strip() or "(no subtitle)"
        frames.append(StoryFrame(image=images[orig_idx], caption=text,
                                 narration=text, index=new_idx))
    return Story(frames=frames)
