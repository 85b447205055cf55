"""Query-slot mask-set decoder conditioned on a single concept vector.

The condition enters twice: added to every query slot embedding, and as a
per-channel scale-and-shift on the pixel features. A fixed slate of slots
cross-attends to the modulated features; each slot emits a mask via a dot
product with the pixel embedding plus a scalar confidence. Variable
cardinality is expressed only through the confidences.

A separate single-mask path (used by the per-token baseline) shares the
feature modulation and pixel embedding but decodes one mask directly from
the condition, with no slot slate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DecoderConfig:
    num_queries: int = 16  # must exceed the max instances per concept group (12)
    cond_width: int = 128
    channels: int = 128
    layers: int = 2
    image_size: int = 64
    down_factor: int = 4

    def __post_init__(self) -> None:
        if self.num_queries < 1:
            raise ValueError("need at least one query slot")
        if self.image_size % self.down_factor != 0:
            raise ValueError("down_factor must divide image_size")

    @property
    def feat_size(self) -> int:
        return self.image_size // self.down_factor


@dataclass
class MaskPrediction:
    """One decoding pass: a fixed slate of mask logits plus confidences."""

    mask_logits: torch.Tensor   # (N_q, H, W) at image resolution
    score_logits: torch.Tensor  # (N_q,)

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.score_logits)

    @property
    def num_slots(self) -> int:
        return int(self.score_logits.shape[0])


class VisualEncoder(nn.Module):
    """Strided conv stack, 4x downsampling, deterministic."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        c = config.channels
        self.config = config
        self.net = nn.Sequential(
            nn.Conv2d(3, c // 4, 3, padding=1), nn.GELU(),
            nn.Conv2d(c // 4, c // 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) float in [0,1] -> (B, C, H/4, W/4)."""
        if images.shape[1] != self.config.image_size or images.shape[2] != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}x{self.config.image_size} images, got {tuple(images.shape)}"
            )
        return self.net(images.permute(0, 3, 1, 2))


class _DecoderLayer(nn.Module):
    def __init__(self, c: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.ln_q1 = nn.LayerNorm(c)
        self.ln_kv = nn.LayerNorm(c)
        self.cross_qkv = nn.ModuleDict({
            "q": nn.Linear(c, c), "k": nn.Linear(c, c), "v": nn.Linear(c, c), "o": nn.Linear(c, c)
        })
        self.ln_q2 = nn.LayerNorm(c)
        self.self_qkv = nn.Linear(c, 3 * c)
        self.self_o = nn.Linear(c, c)
        self.ln_mlp = nn.LayerNorm(c)
        self.mlp = nn.Sequential(nn.Linear(c, 4 * c), nn.GELU(), nn.Linear(4 * c, c))

    def _split(self, u: torch.Tensor) -> torch.Tensor:
        b, t, c = u.shape
        return u.view(b, t, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, queries: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        b, t, c = queries.shape
        qn, kvn = self.ln_q1(queries), self.ln_kv(pixels)
        q = self._split(self.cross_qkv["q"](qn))
        k = self._split(self.cross_qkv["k"](kvn))
        v = self._split(self.cross_qkv["v"](kvn))
        att = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, t, c)
        queries = queries + self.cross_qkv["o"](att)

        qn = self.ln_q2(queries)
        q, k, v = (self._split(u) for u in self.self_qkv(qn).chunk(3, dim=-1))
        att = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, t, c)
        queries = queries + self.self_o(att)
        return queries + self.mlp(self.ln_mlp(queries))


class MaskSetDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        c = config.channels
        n = config.feat_size
        self.query_emb = nn.Parameter(torch.randn(config.num_queries, c) * 0.02)
        self.pixel_pos = nn.Parameter(torch.randn(n * n, c) * 0.02)
        self.film = nn.Linear(config.cond_width, 2 * c)
        self.cond_to_query = nn.Linear(config.cond_width, c)
        self.layers = nn.ModuleList(_DecoderLayer(c) for _ in range(config.layers))
        self.ln_out = nn.LayerNorm(c)
        self.pixel_embed = nn.Conv2d(c, c, 1)
        self.score_head = nn.Linear(c, 1)
        # single-mask path for the per-token baseline
        self.single_mask_mlp = nn.Sequential(nn.Linear(config.cond_width, c), nn.GELU(), nn.Linear(c, c))
        self.single_score = nn.Linear(config.cond_width, 1)

    def _modulate(self, features: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(cond).chunk(2, dim=-1)
        return features * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]

    def _pixel_grid(self, features: torch.Tensor, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Condition-modulated pixel tokens and the mask-embedding grid."""
        mod = self._modulate(features, cond)
        b, c, h, w = mod.shape
        tokens = mod.flatten(2).transpose(1, 2) + self.pixel_pos
        embed = self.pixel_embed(mod)
        return tokens, embed

    def _upsample(self, logits: torch.Tensor) -> torch.Tensor:
        return F.interpolate(logits, scale_factor=self.config.down_factor,
                             mode="bilinear", align_corners=False)

    def decode_batch(self, features: torch.Tensor, conds: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, h, w) x (B, cond_width) -> mask logits (B, N_q, H, W), score logits (B, N_q)."""
        if conds.shape[-1] != self.config.cond_width:
            raise ValueError(f"condition width {conds.shape[-1]} != configured {self.config.cond_width}")
        if not torch.isfinite(conds).all():
            raise ValueError("condition has non-finite entries")
        b = features.shape[0]
        tokens, embed = self._pixel_grid(features, conds)
        queries = self.query_emb.unsqueeze(0) + self.cond_to_query(conds).unsqueeze(1)
        for layer in self.layers:
            queries = layer(queries, tokens)
        queries = self.ln_out(queries)
        logits = torch.einsum("bqc,bchw->bqhw", queries, embed) / math.sqrt(self.config.channels)
        score_logits = self.score_head(queries).squeeze(-1)
        return self._upsample(logits), score_logits

    def decode(self, features: torch.Tensor, cond: torch.Tensor) -> MaskPrediction:
        """Single pass over one image's features with one condition vector."""
        mask_logits, score_logits = self.decode_batch(features.unsqueeze(0), cond.unsqueeze(0))
        return MaskPrediction(mask_logits=mask_logits[0], score_logits=score_logits[0])

    def decode_single_batch(self, features: torch.Tensor, conds: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-token baseline: one mask and one score per condition."""
        _, embed = self._pixel_grid(features, conds)
        mask_vec = self.single_mask_mlp(conds)
        logits = torch.einsum("bc,bchw->bhw", mask_vec, embed) / math.sqrt(self.config.channels)
        logits = self._upsample(logits.unsqueeze(1)).squeeze(1)
        score_logits = self.single_score(conds).squeeze(-1)
        return logits, score_logits
