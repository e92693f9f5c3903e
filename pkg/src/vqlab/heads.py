"""Query-conditioned detection heads.

Five variants share one interface: an independent inner-product scorer
(`siam`), plain self/cross-attention transformers, and the conditioned
contextual head in its concatenation (`coco_concat`) and conditional
projection (`coco_cond`) forms. The conditional projection is a trainable
3D tensor contracted with the query feature to produce a query-specific
linear map over proposal features; attention then mixes the conditioned
embeddings as an unordered set.

All modules run in float64; scores are independent per-proposal sigmoids.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .core import Box

VARIANTS = ("siam", "self_attention", "cross_attention", "coco_concat", "coco_cond")

TITLE_PROMPT = "a photo of a {}"
_TITLE_BUCKETS = 512
DELTA_CLAMP = 4.0


@dataclass(frozen=True)
class HeadConfig:
    variant: str = "coco_cond"
    feature_dim: int = 64  # C_in, must match the extractor
    cond_dim: int = 64  # C_cond
    c_out: int = 64
    num_heads: int = 4
    num_attention_layers: int = 2
    use_text: bool = False
    use_box_refine: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}")
        if self.c_out % self.num_heads != 0:
            raise ValueError("c_out must be divisible by num_heads")


@dataclass
class HeadOutput:
    scores: torch.Tensor  # (N,), values in (0, 1)
    deltas: Optional[torch.Tensor]  # (N, 4) as (dx, dy, dw, dh) or None


def conditional_projection(weight: torch.Tensor, q: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Contract the (C_out, C_in, C_cond) tensor with q, apply the map to xs.

    M[o, i] = sum_c weight[o, i, c] * q[c];  output_j = M @ xs_j. Bilinear in
    (q, xs), no bias.
    """
    if weight.shape[2] != q.shape[0]:
        raise ValueError(f"condition dim mismatch: {weight.shape[2]} vs {q.shape[0]}")
    if weight.shape[1] != xs.shape[-1]:
        raise ValueError(f"input dim mismatch: {weight.shape[1]} vs {xs.shape[-1]}")
    m = torch.einsum("oic,c->oi", weight, q)
    return xs @ m.T


class ConditionalGenerator(torch.nn.Module):
    """Trainable 3D tensor producing query-specific linear maps."""

    def __init__(self, c_out: int, c_in: int, c_cond: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        std = 1.0 / math.sqrt(c_in * c_cond)
        w = torch.empty(c_out, c_in, c_cond, dtype=torch.float64)
        w.normal_(0.0, std, generator=generator)
        self.weight = torch.nn.Parameter(w)

    def forward(self, q: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
        return conditional_projection(self.weight, q, xs)


class MultiHeadAttention(torch.nn.Module):
    """Standard multi-head attention; output projection zero-initialized."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = torch.nn.Linear(dim, dim).double()
        self.k_proj = torch.nn.Linear(dim, dim).double()
        self.v_proj = torch.nn.Linear(dim, dim).double()
        self.out_proj = torch.nn.Linear(dim, dim).double()
        with torch.no_grad():
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor) -> torch.Tensor:
        nq, d = queries.shape
        nk = keys_values.shape[0]
        h, hd = self.num_heads, self.head_dim
        q = self.q_proj(queries).reshape(nq, h, hd).transpose(0, 1)
        k = self.k_proj(keys_values).reshape(nk, h, hd).transpose(0, 1)
        v = self.v_proj(keys_values).reshape(nk, h, hd).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(hd), dim=-1)
        mixed = (attn @ v).transpose(0, 1).reshape(nq, d)
        return self.out_proj(mixed)


class AttentionBlock(torch.nn.Module):
    """Pre-norm residual attention block with a tanh feed-forward sublayer.

    Attention output projection and the second feed-forward layer start at
    zero, so a fresh block is the identity map.
    """

    def __init__(self, dim: int, num_heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = torch.nn.LayerNorm(dim).double()
        self.norm2 = torch.nn.LayerNorm(dim).double()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.fc1 = torch.nn.Linear(dim, ffn_mult * dim).double()
        self.fc2 = torch.nn.Linear(ffn_mult * dim, dim).double()
        with torch.no_grad():
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()

    def forward(self, x: torch.Tensor, kv: Optional[torch.Tensor] = None) -> torch.Tensor:
        normed = self.norm1(x)
        context = normed if kv is None else self.norm1(kv)
        x = x + self.attn(normed, context)
        return x + self.fc2(torch.tanh(self.fc1(self.norm2(x))))


class SetAttention(torch.nn.Module):
    """Stacked residual self-attention blocks without positional encoding."""

    def __init__(self, dim: int, num_heads: int, num_layers: int):
        super().__init__()
        self.blocks = torch.nn.ModuleList(AttentionBlock(dim, num_heads) for _ in range(num_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def format_prompt(title: str) -> str:
    if not title:
        raise ValueError("empty title")
    return TITLE_PROMPT.format(title)


def embed_title(title: str, cond_dim: int = 64, seed: int = 7) -> np.ndarray:
    """Deterministic hashed character-trigram embedding of the title prompt."""
    prompt = format_prompt(title)
    counts = np.zeros(_TITLE_BUCKETS, dtype=np.float64)
    padded = f"  {prompt}  "
    for i in range(len(padded) - 2):
        tri = padded[i : i + 3].encode("utf-8")
        bucket = int.from_bytes(hashlib.sha256(tri).digest()[:4], "little") % _TITLE_BUCKETS
        counts[bucket] += 1.0
    proj = np.random.default_rng(seed).standard_normal((cond_dim, _TITLE_BUCKETS)) / math.sqrt(_TITLE_BUCKETS)
    vec = proj @ counts
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def apply_deltas(boxes: Sequence[Box], deltas: torch.Tensor, frame_w: float, frame_h: float) -> List[Box]:
    """Standard center/size refinement, clipped to the frame."""
    out = []
    d = deltas.detach().clamp(-DELTA_CLAMP, DELTA_CLAMP)
    for i, box in enumerate(boxes):
        cx, cy = box.center
        cx = cx + float(d[i, 0]) * box.w
        cy = cy + float(d[i, 1]) * box.h
        w = box.w * math.exp(float(d[i, 2]))
        h = box.h * math.exp(float(d[i, 3]))
        refined = Box(cx - w / 2.0, cy - h / 2.0, w, h).clipped(frame_w, frame_h)
        out.append(refined if refined is not None else box)
    return out


class QueryConditionedHead(torch.nn.Module):
    """One scoring head in any of the five variants."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)  # covers default Linear inits below
        c_in, c_cond, d = config.feature_dim, config.cond_dim, config.c_out

        if config.use_text:
            self.text_fuse = torch.nn.Linear(2 * c_cond, c_cond).double()

        v = config.variant
        if v == "siam":
            # a large initial scale saturates the sigmoid (every proposal
            # scores ~1) and the first epochs of negative gradients then
            # drive the scale through zero; start gentle and let it grow
            self.temperature = torch.nn.Parameter(torch.tensor(1.0, dtype=torch.float64))
            # random-projection cosines concentrate near a positive mean, so
            # calibration needs an offset as well as a scale
            self.score_bias = torch.nn.Parameter(torch.tensor(0.0, dtype=torch.float64))
            self.refine_in_dim = c_in
        else:
            if v == "coco_cond":
                self.generator = ConditionalGenerator(d, c_in, c_cond, generator=gen)
            elif v == "coco_concat":
                self.reduce = torch.nn.Linear(c_in + c_cond, d).double()
            else:
                self.x_embed = torch.nn.Linear(c_in, d).double()
                self.q_embed = torch.nn.Linear(c_cond, d).double()
            if v == "cross_attention":
                self.blocks = torch.nn.ModuleList(
                    AttentionBlock(d, config.num_heads) for _ in range(config.num_attention_layers)
                )
            else:
                self.set_attention = SetAttention(d, config.num_heads, config.num_attention_layers)
            self.classifier = torch.nn.Linear(d, 1).double()
            self.refine_in_dim = d

        if config.use_box_refine:
            self.refine = torch.nn.Linear(self.refine_in_dim, 4).double()
            with torch.no_grad():
                self.refine.weight.zero_()
                self.refine.bias.zero_()

    def condition(self, q: torch.Tensor, title_embed: Optional[torch.Tensor]) -> torch.Tensor:
        if self.config.use_text:
            if title_embed is None:
                title_embed = torch.zeros(self.config.cond_dim, dtype=q.dtype)
            return self.text_fuse(torch.cat([q, title_embed]))
        return q

    def forward(
        self,
        q: torch.Tensor,
        xs: torch.Tensor,
        title_embed: Optional[torch.Tensor] = None,
    ) -> HeadOutput:
        """Score a proposal feature matrix xs (N, C_in) against query q."""
        if xs.ndim != 2 or xs.shape[0] == 0:
            raise ValueError("proposal feature matrix must be (N, C_in), N >= 1")
        cond = self.condition(q, title_embed)
        v = self.config.variant

        if v == "siam":
            qn = cond / cond.norm().clamp_min(1e-12)
            xn = xs / xs.norm(dim=1, keepdim=True).clamp_min(1e-12)
            scores = torch.sigmoid(self.temperature * (xn @ qn) + self.score_bias)
            embeddings = xs
        else:
            if v == "coco_cond":
                tokens = self.generator(cond, xs)
                embeddings = self.set_attention(tokens)
            elif v == "coco_concat":
                tokens = self.reduce(torch.cat([xs, cond.expand(xs.shape[0], -1)], dim=1))
                embeddings = self.set_attention(tokens)
            elif v == "self_attention":
                q_token = self.q_embed(cond).unsqueeze(0)
                tokens = torch.cat([self.x_embed(xs), q_token], dim=0)
                embeddings = self.set_attention(tokens)[: xs.shape[0]]
            else:  # cross_attention
                embeddings = self.x_embed(xs)
                q_token = self.q_embed(cond).unsqueeze(0)
                for block in self.blocks:
                    embeddings = block(embeddings, kv=q_token)
            scores = torch.sigmoid(self.classifier(embeddings).squeeze(-1))

        deltas = self.refine(embeddings) if self.config.use_box_refine else None
        return HeadOutput(scores=scores, deltas=deltas)
