"""Quantitative metrics over pluggable feature extractors.

Fréchet distance between Gaussian fits of two embedding sets, mean pairwise
cosine similarity (image-image and text-image), and a deterministic toy
extractor so the whole suite runs without any pretrained network. Real
CLIP/DINO/Inception extractors plug in behind the same FeatureSet interface
by supplying their own extractor_id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import default_vocab

TOY_EXTRACTOR_ID = "toy"

_HIST_BINS = 3
_PATCH_POOL = 4
_SCENE_POOL = 4
_BLOCK_WEIGHTS = {"hist": 1.0, "patch": 1.0, "moments": 0.5, "scene": 0.2, "text": 1.0}


@dataclass(frozen=True)
class FeatureSet:
    """Embedding matrix [n, d] tagged with the extractor that produced it."""

    vectors: np.ndarray
    extractor_id: str

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("vectors must be a non-empty [n, d] matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors must be finite")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _check_comparable(a: FeatureSet, b: FeatureSet):
    if a.extractor_id != b.extractor_id:
        raise ValueError(f"extractor mismatch: {a.extractor_id!r} vs {b.extractor_id!r}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """Fréchet distance between Gaussians fitted to the two sets:

        |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))

    Covariances use the unbiased (n-1) estimator with 1e-6 added to the
    diagonal; the matrix square root goes through symmetric
    eigendecompositions with negative eigenvalues clipped at zero.
    """
    _check_comparable(a, b)
    if a.n < 2 or b.n < 2:
        raise ValueError("at least two vectors per set are required")
    xa = a.vectors.astype(np.float64)
    xb = b.vectors.astype(np.float64)
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    eye = np.eye(a.dim) * 1e-6
    sa = np.cov(xa, rowvar=False, ddof=1) + eye
    sb = np.cov(xb, rowvar=False, ddof=1) + eye

    root_a = _sym_sqrt(sa)
    cross = _sym_sqrt(root_a @ sb @ root_a)
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return max(mean_term + trace_term, 0.0)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("zero-norm vector encountered")
    return np.sum(a * b, axis=1) / (na * nb)


def pair_similarity(a: FeatureSet, b: FeatureSet) -> float:
    """Mean cosine similarity between corresponding rows of the two sets."""
    _check_comparable(a, b)
    if a.n != b.n:
        raise ValueError(f"row counts differ: {a.n} vs {b.n}")
    return float(np.mean(_row_cosines(a.vectors.astype(np.float64),
                                      b.vectors.astype(np.float64))))


def text_image_similarity(images: FeatureSet, texts: FeatureSet) -> float:
    """Mean row-wise cosine between image and text embeddings.

    Both sets must live in the same embedding space. Under the toy extractor
    the two modalities occupy orthogonal blocks, so cross-modal values are
    structurally near zero; plug in a jointly trained extractor for
    meaningful text-image scores.
    """
    return pair_similarity(images, texts)


def consecutive_similarity(frames: FeatureSet) -> float:
    """Mean cosine between embeddings of consecutive frames."""
    if frames.n < 2:
        raise ValueError("need at least two frames")
    a = FeatureSet(frames.vectors[:-1], frames.extractor_id)
    b = FeatureSet(frames.vectors[1:], frames.extractor_id)
    return pair_similarity(a, b)


# --------------------------------------------------------------------------
# the toy extractor
# --------------------------------------------------------------------------

def _pool(x: np.ndarray, out: int) -> np.ndarray:
    """Average-pool a [.., h, w] map to [.., out, out] by cropping to a multiple."""
    h, w = x.shape[-2:]
    ch, cw = (h // out) * out, (w // out) * out
    x = x[..., :ch, :cw]
    x = x.reshape(*x.shape[:-2], out, ch // out, out, cw // out)
    return x.mean(axis=(-3, -1))


def _image_blocks(image: np.ndarray) -> dict[str, np.ndarray]:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("image must be [3, H, W]")
    unit = np.clip((image.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
    _, h, w = unit.shape
    sat = unit.max(axis=0) - unit.min(axis=0)
    # the floor zeroes out muted regions entirely, so weak background colors
    # cannot drag the centroid or pollute the histogram
    weight = np.clip(sat - 0.25, 0.0, None) ** 2

    # saturation-weighted coarse color histogram
    bins = np.clip((unit * _HIST_BINS).astype(int), 0, _HIST_BINS - 1)
    flat = (bins[0] * _HIST_BINS + bins[1]) * _HIST_BINS + bins[2]
    hist = np.bincount(flat.ravel(), weights=weight.ravel(),
                       minlength=_HIST_BINS ** 3)

    # saturation-weighted patch around the saturation centroid
    total = weight.sum()
    rr, cc = np.mgrid[0:h, 0:w]
    if total > 1e-9:
        mr = float((rr * weight).sum() / total)
        mc = float((cc * weight).sum() / total)
    else:
        mr, mc = (h - 1) / 2.0, (w - 1) / 2.0
    crop = max((min(h, w) // 2) // _PATCH_POOL * _PATCH_POOL, _PATCH_POOL)
    r0 = min(max(int(round(mr)) - crop // 2, 0), h - crop)
    c0 = min(max(int(round(mc)) - crop // 2, 0), w - crop)
    patch_src = (unit * weight[None]) [:, r0:r0 + crop, c0:c0 + crop]
    patch = _pool(patch_src, _PATCH_POOL).ravel()

    # low-order central moments of the saturation mass, size-normalized
    if total > 1e-9:
        dr = (rr - mr) / h
        dc = (cc - mc) / w
        pq = [(2, 0), (0, 2), (1, 1), (3, 0), (0, 3), (2, 1), (1, 2)]
        moments = np.array([float((weight * dr ** p * dc ** q).sum() / total)
                            for p, q in pq])
    else:
        moments = np.zeros(7)

    # coarse luminance layout of the full frame
    scene = _pool(unit.mean(axis=0), _SCENE_POOL).ravel()

    return {"hist": hist, "patch": patch, "moments": moments, "scene": scene}


def _text_block(text: str) -> np.ndarray:
    vocab = default_vocab()
    index = {w: i for i, w in enumerate(vocab)}
    vec = np.zeros(len(vocab) + 1)
    for w in text.lower().split():
        vec[index.get(w, len(vocab))] += 1.0
    return vec


def toy_embed(item) -> np.ndarray:
    """Deterministic unit-norm embedding of an image array or a prompt string.

    Images embed as weighted blocks (color histogram, centered appearance
    patch, shape moments, scene layout); prompts embed as a bag-of-token
    indicator. The two modalities occupy disjoint coordinate blocks of one
    shared space.
    """
    img_dims = {"hist": _HIST_BINS ** 3, "patch": 3 * _PATCH_POOL ** 2,
                "moments": 7, "scene": _SCENE_POOL ** 2}
    text_dim = len(default_vocab()) + 1
    if isinstance(item, str):
        blocks = {name: np.zeros(d) for name, d in img_dims.items()}
        blocks["text"] = _text_block(item)
    elif isinstance(item, np.ndarray):
        blocks = _image_blocks(item)
        blocks["text"] = np.zeros(text_dim)
    else:
        raise TypeError(f"cannot embed {type(item).__name__}")
    parts = []
    for name in ("hist", "patch", "moments", "scene", "text"):
        block = blocks[name].astype(np.float64)
        norm = np.linalg.norm(block)
        if norm > 1e-12:
            block = block / norm
        parts.append(_BLOCK_WEIGHTS[name] * block)
    vec = np.concatenate(parts)
    return vec / np.linalg.norm(vec)


def embed_images(images, extractor=None) -> FeatureSet:
    fn = extractor or toy_embed
    eid = TOY_EXTRACTOR_ID if extractor is None else getattr(extractor, "extractor_id", "plugin")
    return FeatureSet(np.stack([fn(img) for img in images]), eid)


def embed_texts(texts, extractor=None) -> FeatureSet:
    fn = extractor or toy_embed
    eid = TOY_EXTRACTOR_ID if extractor is None else getattr(extractor, "extractor_id", "plugin")
    return FeatureSet(np.stack([fn(t) for t in texts]), eid)
