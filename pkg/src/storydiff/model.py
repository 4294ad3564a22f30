"""Denoising UNet with text and reference-image cross-attention.

The trunk is a multi-resolution convolutional UNet; transformer blocks sit at
configurable resolution levels and contain, in order: self-attention, a
cross-attention stage where a text branch and (when enabled) an image branch
run in parallel with their raw attention outputs summed, then a feed-forward
layer. Each sub-layer is wrapped in a residual connection.

The same parameter set serves two roles: a feature-extraction pass
(capture_features=True, context absent) exposes the activation right after
every self-attention layer, and a generation pass consumes such activations
through the image cross-attention branch. There is exactly one parameter
storage; the extractor simply skips the image branch.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LatentImage


class _NullText:
    """Sentinel selecting the learned null text embedding."""

    def __repr__(self):
        return "NULL_TEXT"


class _NullContext:
    """Sentinel selecting the learned per-level null context tokens."""

    def __repr__(self):
        return "NULL_CONTEXT"


NULL_TEXT = _NullText()
NULL_CONTEXT = _NullContext()

PARAMETER_GROUP_NAMES = (
    "self_attention",
    "text_cross_attention",
    "image_cross_attention",
    "trunk",
    "text_encoder",
    "null_conditions",
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    base_width: int = 32
    levels: int = 3
    heads: int = 4
    embed_dim: int = 64
    vocab: tuple[str, ...] = ()
    context_enabled: bool = False
    # None puts a transformer block at every level; otherwise only at the
    # listed levels (level 0 is full resolution).
    attention_levels: tuple[int, ...] | None = None
    max_tokens: int = 16
    # Multiplier on the image-branch attention output before summation with
    # the text branch.
    context_scale: float = 1.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.vocab:
            raise ValueError("vocab must be non-empty")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab entries must be unique")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_size % (2 ** (self.levels - 1)) != 0:
            raise ValueError("image_size must be divisible by 2^(levels-1)")
        for l in range(self.levels):
            if self.width(l) % self.heads != 0:
                raise ValueError(f"width at level {l} must be divisible by heads")
        for l in self.attn_levels:
            if not 0 <= l < self.levels:
                raise ValueError(f"attention level {l} out of range")

    def width(self, level: int) -> int:
        return self.base_width * (level + 1)

    @property
    def attn_levels(self) -> tuple[int, ...]:
        if self.attention_levels is None:
            return tuple(range(self.levels))
        return tuple(self.attention_levels)

    def resolution(self, level: int) -> int:
        return self.image_size // (2 ** level)


@dataclass(frozen=True)
class TextEmbedding:
    """Token-sequence embedding of a prompt: [n_tokens, embed_dim]."""

    tokens: torch.Tensor
    prompt_hash: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("tokens must be [n_tokens, embed_dim] with n_tokens >= 1")


@dataclass(frozen=True)
class FeaturePyramid:
    """Post-self-attention activations, one [n_tokens, width] entry per layer."""

    layers: tuple[torch.Tensor, ...]
    levels: tuple[int, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.levels):
            raise ValueError("one level tag per layer is required")


def attention(queries_in: torch.Tensor, keys_values_in: torch.Tensor,
              w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
              heads: int = 1, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d)) V with learned projections.

    Q = queries_in @ w_q, K/V = keys_values_in @ w_k / w_v.  The projection
    width is split across `heads`; with heads=1 this is exactly single-head
    scaled dot-product attention and every output row is a convex combination
    of the rows of V.

    key_mask, when given, is a boolean tensor [..., n_kv] marking valid keys.
    """
    d = w_q.shape[1]
    if w_k.shape[1] != d or w_v.shape[1] != d:
        raise ValueError("projection widths must agree")
    if d % heads != 0:
        raise ValueError("projection width must be divisible by heads")
    if queries_in.shape[-1] != w_q.shape[0] or keys_values_in.shape[-1] != w_k.shape[0]:
        raise ValueError("input widths do not match the projection matrices")
    q = queries_in @ w_q
    k = keys_values_in @ w_k
    v = keys_values_in @ w_v

    def split(x):
        return x.reshape(*x.shape[:-1], heads, d // heads).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    mask = None
    if key_mask is not None:
        mask = key_mask.unsqueeze(-2).unsqueeze(-2)  # broadcast over heads, queries
    out = F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask)
    return out.transpose(-3, -2).reshape(*q.shape[:-1], d)


class AttentionLayer(nn.Module):
    """Projection triple for one attention branch (no output projection)."""

    def __init__(self, q_dim: int, kv_dim: int, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(q_dim, width))
        self.w_k = nn.Parameter(torch.empty(kv_dim, width))
        self.w_v = nn.Parameter(torch.empty(kv_dim, width))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)

    def forward(self, q_in, kv_in, key_mask=None):
        return attention(q_in, kv_in, self.w_q, self.w_k, self.w_v,
                         heads=self.heads, key_mask=key_mask)


class TransformerBlock(nn.Module):
    """Self-attention, parallel text/image cross-attention, feed-forward."""

    def __init__(self, width: int, cfg: ModelConfig, level: int):
        super().__init__()
        self.level = level
        self.context_scale = cfg.context_scale
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = AttentionLayer(width, width, width, cfg.heads)
        self.norm_cross = nn.LayerNorm(width)
        self.text_attn = AttentionLayer(width, cfg.embed_dim, width, cfg.heads)
        self.img_attn = (AttentionLayer(width, width, width, cfg.heads)
                         if cfg.context_enabled else None)
        self.norm_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(
            nn.Linear(width, 4 * width),
            nn.GELU(),
            nn.Linear(4 * width, width),
        )

    def forward(self, seq, text_tokens, text_mask, ctx_tokens, ctx_mask, capture):
        h = self.norm_self(seq)
        seq = seq + self.self_attn(h, h)
        captured = seq if capture else None

        h = self.norm_cross(seq)
        out = self.text_attn(h, text_tokens, key_mask=text_mask)
        if ctx_tokens is not None:
            if self.img_attn is None:
                raise ValueError("context given but image cross-attention is disabled")
            out = out + self.context_scale * self.img_attn(h, ctx_tokens, key_mask=ctx_mask)
        seq = seq + out
        seq = seq + self.ff(self.norm_ff(seq))
        return seq, captured


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h, t_emb):
        residue = h
        h = self.conv1(F.silu(self.norm1(h)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(residue)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal timestep embedding, t: [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _flatten(h: torch.Tensor) -> torch.Tensor:
    b, c, hh, ww = h.shape
    return h.permute(0, 2, 3, 1).reshape(b, hh * ww, c)


def _unflatten(seq: torch.Tensor, hh: int, ww: int) -> torch.Tensor:
    b, n, c = seq.shape
    return seq.reshape(b, hh, ww, c).permute(0, 3, 1, 2)


class StoryUNet(nn.Module):
    """The denoising network; also the context-feature extractor.

    `denoise` accepts a single [C, H, W] latent; `denoise_batch` accepts
    per-sample condition lists and handles padding internally.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self._token_index = {tok: i for i, tok in enumerate(cfg.vocab)}

        # text encoder: token table plus learned per-position offsets
        # (positions start at zero so a fresh model returns raw table rows)
        self.token_table = nn.Embedding(len(cfg.vocab), cfg.embed_dim)
        self.pos_table = nn.Parameter(torch.zeros(cfg.max_tokens, cfg.embed_dim))

        # null conditions consumed by classifier-free guidance
        self.null_text_token = nn.Parameter(torch.randn(1, cfg.embed_dim) * 0.02)
        if cfg.context_enabled:
            self.null_ctx_tokens = nn.ParameterDict({
                str(l): nn.Parameter(torch.randn(1, cfg.width(l)) * 0.02)
                for l in cfg.attn_levels
            })
        else:
            self.null_ctx_tokens = nn.ParameterDict()

        time_dim = 4 * cfg.base_width
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_width, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

        self.stem = nn.Conv2d(cfg.channels, cfg.width(0), 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for l in range(cfg.levels):
            in_w = cfg.width(l - 1) if l > 0 else cfg.width(0)
            w = cfg.width(l)
            self.down_res.append(ResBlock(in_w, w, time_dim))
            self.down_attn.append(TransformerBlock(w, cfg, l) if l in cfg.attn_levels else None)
            self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1)
                                   if l < cfg.levels - 1 else None)

        deepest = cfg.levels - 1
        w = cfg.width(deepest)
        self.mid_res1 = ResBlock(w, w, time_dim)
        self.mid_attn = TransformerBlock(w, cfg, deepest) if deepest in cfg.attn_levels else None
        self.mid_res2 = ResBlock(w, w, time_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for l in range(cfg.levels - 1, -1, -1):
            w = cfg.width(l)
            in_w = w + (cfg.width(l + 1) if l < cfg.levels - 1 else w)
            self.up_res.append(ResBlock(in_w, w, time_dim))
            self.up_attn.append(TransformerBlock(w, cfg, l) if l in cfg.attn_levels else None)
            self.upsample.append(nn.Conv2d(cfg.width(l + 1), cfg.width(l + 1), 3, padding=1)
                                 if l < cfg.levels - 1 else None)

        w0 = cfg.width(0)
        self.head_norm = nn.GroupNorm(math.gcd(8, w0), w0)
        self.head = nn.Conv2d(w0, cfg.channels, 3, padding=1)

    # ---------------------------------------------------------------- text

    def encode_text(self, prompt: str) -> TextEmbedding:
        """Embed a prompt over the closed vocabulary.

        The empty prompt maps to the learned null-text embedding. Unknown
        tokens raise a ValueError naming the offending token.
        """
        words = prompt.lower().split()
        if not words:
            return TextEmbedding(tokens=self.null_text_token,
                                 prompt_hash=_prompt_hash(""))
        if len(words) > self.config.max_tokens:
            raise ValueError(f"prompt has {len(words)} tokens, limit is {self.config.max_tokens}")
        ids = []
        for w in words:
            if w not in self._token_index:
                raise ValueError(f"token not in vocabulary: {w!r}")
            ids.append(self._token_index[w])
        idx = torch.tensor(ids, dtype=torch.long)
        tokens = self.token_table(idx) + self.pos_table[: len(ids)]
        return TextEmbedding(tokens=tokens, prompt_hash=_prompt_hash(prompt))

    # ------------------------------------------------------------- denoise

    @property
    def attn_layer_levels(self) -> tuple[int, ...]:
        """Level tag of every self-attention layer, in forward order."""
        cfg = self.config
        down = [l for l in range(cfg.levels) if l in cfg.attn_levels]
        mid = [cfg.levels - 1] if (cfg.levels - 1) in cfg.attn_levels else []
        up = [l for l in range(cfg.levels - 1, -1, -1) if l in cfg.attn_levels]
        return tuple(down + mid + up)

    def null_context_layers(self, batch: int, dtype=None) -> list[torch.Tensor]:
        """The learned null token per attention layer, expanded to a batch."""
        if not self.config.context_enabled:
            raise ValueError("model was built without image cross-attention")
        dtype = dtype or self.stem.weight.dtype
        out = []
        for level in self.attn_layer_levels:
            tok = self.null_ctx_tokens[str(level)].to(dtype)
            out.append(tok.unsqueeze(0).expand(batch, -1, -1))
        return out

    def denoise(self, x_t: LatentImage, t: int, text, context=None,
                capture_features: bool = False):
        """Predict the noise in x_t under text and optional visual context.

        x_t: [C, H, W].  text: TextEmbedding or NULL_TEXT.  context: None
        (image branch contributes exactly zero), NULL_CONTEXT (learned null
        tokens), or ContextFeatures.  With capture_features=True, also
        returns the FeaturePyramid of post-self-attention activations.
        """
        if x_t.ndim != 3:
            raise ValueError("denoise expects a single [C, H, W] latent")
        eps, pyramids = self.denoise_batch(
            x_t.unsqueeze(0), torch.tensor([t]), [text], [context],
            capture_features=capture_features)
        if capture_features:
            return eps[0], pyramids[0]
        return eps[0]

    def denoise_batch(self, x_t: torch.Tensor, t: torch.Tensor, texts: list,
                      contexts: list, capture_features: bool = False):
        """Batched denoise with per-sample text and context conditions.

        texts: list of TextEmbedding or NULL_TEXT.  contexts: list whose
        entries are all None (image branch skipped) or a mix of
        ContextFeatures and NULL_CONTEXT.  Returns eps [B, C, H, W], plus a
        list of per-sample FeaturePyramids when capture_features is set.
        """
        cfg = self.config
        b = x_t.shape[0]
        if len(texts) != b or len(contexts) != b:
            raise ValueError("one text and one context entry per sample is required")
        if not isinstance(t, torch.Tensor):
            t = torch.tensor([int(t)] * b)

        dtype = self.stem.weight.dtype
        text_tokens, text_mask = self._collate_texts(texts, dtype)
        ctx_layers, ctx_masks = self._collate_contexts(contexts, b, dtype)

        t_emb = self.time_mlp(sinusoidal_embedding(t, cfg.base_width).to(dtype))

        captured: list[torch.Tensor] = []
        cursor = [0]  # index of the next attention layer, local to this call

        def run_attn(block, h):
            if block is None:
                return h
            j = cursor[0]
            cursor[0] += 1
            ctx_t = ctx_layers[j] if ctx_layers is not None else None
            ctx_m = ctx_masks[j] if ctx_masks is not None else None
            hh, ww = h.shape[-2:]
            seq = _flatten(h)
            seq, cap = block(seq, text_tokens, text_mask, ctx_t, ctx_m, capture_features)
            if capture_features:
                captured.append(cap)
            return _unflatten(seq, hh, ww)

        h = self.stem(x_t)
        skips = []
        for l in range(cfg.levels):
            h = self.down_res[l](h, t_emb)
            h = run_attn(self.down_attn[l], h)
            skips.append(h)
            if self.downsample[l] is not None:
                h = self.downsample[l](h)

        h = self.mid_res1(h, t_emb)
        h = run_attn(self.mid_attn, h)
        h = self.mid_res2(h, t_emb)

        for i, l in enumerate(range(cfg.levels - 1, -1, -1)):
            if l < cfg.levels - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[i](h)
            h = self.up_res[i](torch.cat([h, skips[l]], dim=1), t_emb)
            h = run_attn(self.up_attn[i], h)

        eps = self.head(F.silu(self.head_norm(h)))

        if not capture_features:
            return eps, None
        levels = self.attn_layer_levels
        pyramids = []
        for s in range(b):
            layers = tuple(layer[s] for layer in captured)
            pyramids.append(FeaturePyramid(layers=layers, levels=levels))
        return eps, pyramids

    # ------------------------------------------------------------ collation

    def _collate_texts(self, texts: list, dtype):
        rows = []
        for item in texts:
            if item is NULL_TEXT:
                rows.append(self.null_text_token)
            elif isinstance(item, TextEmbedding):
                rows.append(item.tokens)
            else:
                raise TypeError(f"unsupported text condition: {item!r}")
        n_max = max(r.shape[0] for r in rows)
        if all(r.shape[0] == n_max for r in rows):
            return torch.stack([r.to(dtype) for r in rows]), None
        b = len(rows)
        tokens = torch.zeros(b, n_max, self.config.embed_dim, dtype=dtype)
        mask = torch.zeros(b, n_max, dtype=torch.bool)
        for i, r in enumerate(rows):
            tokens[i, : r.shape[0]] = r.to(dtype)
            mask[i, : r.shape[0]] = True
        return tokens, mask

    def _collate_contexts(self, contexts: list, batch: int, dtype):
        if all(c is None for c in contexts):
            return None, None
        if not self.config.context_enabled:
            raise ValueError("context given but image cross-attention is disabled")
        if any(c is None for c in contexts):
            raise ValueError("cannot mix absent context with context conditions "
                             "in one batch; use NULL_CONTEXT for dropped samples")
        levels = self.attn_layer_levels
        n_layers = len(levels)
        per_sample: list[list[torch.Tensor]] = []
        for c in contexts:
            if c is NULL_CONTEXT:
                per_sample.append([self.null_ctx_tokens[str(l)].to(dtype) for l in levels])
            else:
                c.validate_for(self)
                per_sample.append([layer.to(dtype) for layer in c.layers])
        ctx_layers, ctx_masks = [], []
        for j in range(n_layers):
            rows = [s[j] for s in per_sample]
            n_max = max(r.shape[0] for r in rows)
            width = rows[0].shape[1]
            if all(r.shape[0] == n_max for r in rows):
                ctx_layers.append(torch.stack(rows))
                ctx_masks.append(None)
                continue
            toks = torch.zeros(batch, n_max, width, dtype=dtype)
            mask = torch.zeros(batch, n_max, dtype=torch.bool)
            for i, r in enumerate(rows):
                toks[i, : r.shape[0]] = r
                mask[i, : r.shape[0]] = True
            ctx_layers.append(toks)
            ctx_masks.append(mask)
        if all(m is None for m in ctx_masks):
            ctx_masks = None
        return ctx_layers, ctx_masks

    # ------------------------------------------------------------- grouping

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """Disjoint, exhaustive partition of all learnable parameters."""
        groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in PARAMETER_GROUP_NAMES}
        for name, p in self.named_parameters():
            groups[_classify_parameter(name)][name] = p
        return groups


def _classify_parameter(name: str) -> str:
    if ".self_attn." in name or ".norm_self." in name:
        return "self_attention"
    if ".text_attn." in name or ".norm_cross." in name:
        return "text_cross_attention"
    if ".img_attn." in name:
        return "image_cross_attention"
    if name.startswith(("token_table", "pos_table")):
        return "text_encoder"
    if name.startswith(("null_text_token", "null_ctx_tokens")):
        return "null_conditions"
    return "trunk"


def _prompt_hash(prompt: str) -> str:
    return hashlib.sha1(prompt.encode("utf-8")).hexdigest()
