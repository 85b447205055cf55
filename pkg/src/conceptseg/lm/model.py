"""Tiny decoder-only transformer with a visual patch prefix.

The image enters as a grid of linearly embedded patches occupying the
first positions. Patch positions attend bidirectionally among themselves;
text positions are strictly causal, so logits at a text position depend
only on earlier positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocab import Vocabulary

ROLE_ORDER = ("visual", "prompt", "response")


class ContextError(ValueError):
    """Sequence exceeds the configured context length."""


class UndefinedLossError(ValueError):
    """The sequence has no response positions to train on."""


@dataclass(frozen=True)
class LmConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    context: int = 256
    patch_grid: int = 8
    image_size: int = 64
    vocab_size: int = 0

    def __post_init__(self) -> None:
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by head count")
        if self.image_size % self.patch_grid != 0:
            raise ValueError("patch grid must tile the image")

    @property
    def n_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def patch_size(self) -> int:
        return self.image_size // self.patch_grid


@dataclass
class TokenSequence:
    """Token ids with per-position roles; visual positions carry pad ids."""

    ids: list[int]
    roles: list[str]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.roles):
            raise ValueError("ids and roles must have equal length")
        order = [ROLE_ORDER.index(r) for r in self.roles]
        if any(b < a for a, b in zip(order, order[1:])):
            raise ValueError("roles must be contiguous in visual, prompt, response order")

    def __len__(self) -> int:
        return len(self.ids)

    def positions(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    @property
    def response_ids(self) -> list[int]:
        return [self.ids[i] for i in self.positions("response")]


def build_sequence(n_visual: int, prompt_ids: list[int], response_ids: list[int], pad_id: int) -> TokenSequence:
    ids = [pad_id] * n_visual + list(prompt_ids) + list(response_ids)
    roles = ["visual"] * n_visual + ["prompt"] * len(prompt_ids) + ["response"] * len(response_ids)
    return TokenSequence(ids=ids, roles=roles)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.ln2 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, attn_mask, cache=None):
        b, t, w = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)

        def split(u):
            return u.view(b, -1, self.heads, w // self.heads).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        if cache is not None:
            if cache.get(id(self)) is not None:
                pk, pv = cache[id(self)]
                k = torch.cat([pk, k], dim=2)
                v = torch.cat([pv, v], dim=2)
            cache[id(self)] = (k, v)
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        att = att.transpose(1, 2).reshape(b, t, w)
        x = x + self.proj(att)
        return x + self.mlp(self.ln2(x))


def _prefix_causal_mask(t_total: int, n_prefix: int, device) -> torch.Tensor:
    allowed = torch.tril(torch.ones(t_total, t_total, dtype=torch.bool, device=device))
    allowed[:n_prefix, :n_prefix] = True
    return allowed


class TinyConceptLM(nn.Module):
    """Toy stand-in for an instruction-following vision language model."""

    def __init__(self, config: LmConfig):
        super().__init__()
        if config.vocab_size <= 0:
            raise ValueError("vocab_size must be set")
        self.config = config
        ps = config.patch_size
        self.tok_emb = nn.Embedding(config.vocab_size, config.width)
        self.pos_emb = nn.Embedding(config.context, config.width)
        self.patch_proj = nn.Linear(3 * ps * ps, config.width)
        self.blocks = nn.ModuleList(_Block(config.width, config.heads) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.width)
        self.head = nn.Linear(config.width, config.vocab_size)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) float in [0,1] -> (B, n_patches, 3*ps*ps)."""
        b, h, w, _ = images.shape
        g, ps = self.config.patch_grid, self.config.patch_size
        x = images.view(b, g, ps, g, ps, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, ps * ps * 3)

    def forward(
        self,
        text_ids: torch.Tensor,
        images: torch.Tensor,
        valid: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Full-sequence forward over [visual prefix, text].

        text_ids: (B, T) token ids, right-padded; valid: (B, T) bool marking
        real tokens. Returns (logits, hidden), both (B, P+T, ...).
        """
        b, t_text = text_ids.shape
        p = self.config.n_patches
        total = p + t_text
        if total > self.config.context:
            raise ContextError(f"sequence length {total} exceeds context {self.config.context}")
        vis = self.patch_proj(self.patchify(images))
        txt = self.tok_emb(text_ids)
        x = torch.cat([vis, txt], dim=1)
        x = x + self.pos_emb.weight[:total]

        allowed = _prefix_causal_mask(total, p, x.device)
        if valid is not None:
            keys_ok = torch.cat([torch.ones(b, p, dtype=torch.bool, device=x.device), valid], dim=1)
            mask = allowed.unsqueeze(0) & keys_ok[:, None, :]
            mask = mask.unsqueeze(1)
        else:
            mask = allowed
        for block in self.blocks:
            x = block(x, mask)
        hidden = self.ln_f(x)
        return self.head(hidden), hidden

    def forward_sequence(self, seq: TokenSequence, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Single-sample forward; the visual prefix replaces the placeholder ids."""
        n_vis = len(seq.positions("visual"))
        if n_vis != self.config.n_patches:
            raise ValueError(f"sequence carries {n_vis} visual positions, model expects {self.config.n_patches}")
        text = torch.tensor([seq.ids[n_vis:]], dtype=torch.long)
        logits, hidden = self.forward(text, image.unsqueeze(0))
        return logits[0], hidden[0]

    @torch.no_grad()
    def generate(
        self,
        vocab: Vocabulary,
        image: torch.Tensor,
        prompt_ids: list[int],
        max_len: int = 64,
    ) -> tuple[list[int], bool]:
        """Greedy decode; returns (response ids without eos, truncated flag)."""
        self.eval()
        p = self.config.n_patches
        device = next(self.parameters()).device
        vis = self.patch_proj(self.patchify(image.unsqueeze(0).to(device)))
        txt = self.tok_emb(torch.tensor([prompt_ids], dtype=torch.long, device=device))
        x = torch.cat([vis, txt], dim=1)
        total = x.shape[1]
        if total + max_len > self.config.context:
            raise ContextError("prompt plus generation budget exceeds context")
        x = x + self.pos_emb.weight[:total]

        cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        mask = _prefix_causal_mask(total, p, device)
        h = x
        for block in self.blocks:
            h = block(h, mask, cache)
        logits = self.head(self.ln_f(h[:, -1]))

        out: list[int] = []
        pos = total
        for _ in range(max_len):
            nxt = int(torch.argmax(logits[0]))
            if nxt == vocab.eos_id:
                return out, False
            out.append(nxt)
            step = self.tok_emb(torch.tensor([[nxt]], device=device)) + self.pos_emb.weight[pos]
            h = step
            for block in self.blocks:
                h = block(h, None, cache)
            logits = self.head(self.ln_f(h[:, -1]))
            pos += 1
        return out, True


def lm_loss(logits: torch.Tensor, target: TokenSequence) -> torch.Tensor:
    """Mean cross-entropy over response positions only.

    The token at response position t is predicted from logits at t-1, so
    prompt and visual logits never enter the loss.
    """
    response = target.positions("response")
    if not response:
        raise UndefinedLossError("sequence has no response positions")
    if response[0] == 0:
        raise UndefinedLossError("a response token at position 0 has no conditioning position")
    idx = torch.tensor(response, dtype=torch.long)
    gold = torch.tensor([target.ids[i] for i in response], dtype=torch.long)
    pred = logits[idx - 1]
    return F.cross_entropy(pred, gold)
