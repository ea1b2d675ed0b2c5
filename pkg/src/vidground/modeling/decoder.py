"""Moment decoder over guided and denoising query groups.

Queries self-attend under a group mask (matched queries never mix with
denoising rows, and separate noise replicas never mix with each other),
cross-attend to [x_s; clip memory], and feed shared prediction heads
after every layer for auxiliary supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import ShapeError
from ..features import MomentSpan
from .denoise import NoiseConfig, perturb_moments
from .layers import (
    CrossAttentionBlock,
    SelfAttentionBlock,
    SpanMLP,
    encode_span_positions,
    expand_attn_mask,
)

TAG_MATCHED = 0
TAG_DN_POS = 1
TAG_DN_NEG = 2
TAG_PAD = 3


@dataclass
class DenoiseRows:
    """Per-sample denoising rows before batching."""

    embeddings: torch.Tensor  # D x d
    tags: torch.Tensor  # D
    provenance: torch.Tensor  # D, GT index per row
    group_ids: torch.Tensor  # D, one id per noise replica


@dataclass
class QueryBatch:
    """Batched decoder input: matched queries plus padded denoise groups."""

    embeddings: torch.Tensor  # B x N x d
    attn_mask: torch.Tensor  # B x N x N bool, True = attention blocked
    tags: torch.Tensor  # B x N
    provenance: torch.Tensor  # B x N (-1 where not a dn row)
    num_matched: int

    @property
    def num_queries(self) -> int:
        return self.embeddings.shape[1]


def combine_queries(q_c: torch.Tensor, q_p: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of content and position queries."""
    if q_c.shape != q_p.shape:
        raise ShapeError(f"query shapes differ: {tuple(q_c.shape)} vs {tuple(q_p.shape)}")
    return q_c + q_p


def build_denoise_rows(windows: list[MomentSpan], cfg: NoiseConfig, d: int,
                       clip_width: float, rng: np.random.Generator,
                       dtype=torch.float64) -> DenoiseRows:
    """Noised copies of the GT moments as position-only decoder rows.

    Each replica (pos or neg) perturbs every GT once and forms its own
    attention group; content is zero, so the embedding is purely the
    sinusoidal encoding of the noised span.
    """
    spans, tags, prov, gids = [], [], [], []
    group = 0
    for _ in range(cfg.pos_replicas):
        noised, _ = perturb_moments(windows, "pos", cfg, rng, clip_width)
        spans.extend(noised)
        tags.extend([TAG_DN_POS] * len(noised))
        prov.extend(range(len(noised)))
        gids.extend([group] * len(noised))
        group += 1
    for _ in range(cfg.neg_replicas):
        noised, _ = perturb_moments(windows, "neg", cfg, rng, clip_width)
        spans.extend(noised)
        tags.extend([TAG_DN_NEG] * len(noised))
        prov.extend(range(len(noised)))
        gids.extend([group] * len(noised))
        group += 1

    if not spans:
        return DenoiseRows(
            embeddings=torch.zeros(0, d, dtype=dtype),
            tags=torch.zeros(0, dtype=torch.long),
            provenance=torch.zeros(0, dtype=torch.long),
            group_ids=torch.zeros(0, dtype=torch.long),
        )
    arr = torch.tensor([[m.center, m.span] for m in spans], dtype=dtype)
    return DenoiseRows(
        embeddings=encode_span_positions(arr, d),
        tags=torch.tensor(tags, dtype=torch.long),
        provenance=torch.tensor(prov, dtype=torch.long),
        group_ids=torch.tensor(gids, dtype=torch.long),
    )


def build_query_batch(matched: torch.Tensor,
                      dn_rows: list[DenoiseRows] | None) -> QueryBatch:
    """Assemble matched queries and per-sample denoise rows into one batch.

    Shorter dn lists are padded with inert rows; the group mask keeps
    matched and dn rows mutually invisible, dn replicas isolated, and
    every row able to attend itself.
    """
    B, K, d = matched.shape
    device, dtype = matched.device, matched.dtype
    D_max = 0 if dn_rows is None else max(r.embeddings.shape[0] for r in dn_rows)
    N = K + D_max

    embeddings = torch.zeros(B, N, d, device=device, dtype=dtype)
    embeddings[:, :K] = matched
    tags = torch.full((B, N), TAG_PAD, dtype=torch.long, device=device)
    tags[:, :K] = TAG_MATCHED
    provenance = torch.full((B, N), -1, dtype=torch.long, device=device)
    group_ids = torch.full((B, N), -2, dtype=torch.long, device=device)
    group_ids[:, :K] = -1

    if dn_rows is not None:
        for b, rows in enumerate(dn_rows):
            D = rows.embeddings.shape[0]
            if D == 0:
                continue
            embeddings[b, K:K + D] = rows.embeddings.to(device=device, dtype=dtype)
            tags[b, K:K + D] = rows.tags.to(device)
            provenance[b, K:K + D] = rows.provenance.to(device)
            group_ids[b, K:K + D] = rows.group_ids.to(device)

    same_group = (group_ids.unsqueeze(2) == group_ids.unsqueeze(1)) \
        & (group_ids >= 0).unsqueeze(2) & (group_ids >= 0).unsqueeze(1)
    both_matched = (tags == TAG_MATCHED).unsqueeze(2) & (tags == TAG_MATCHED).unsqueeze(1)
    allowed = same_group | both_matched
    allowed |= torch.eye(N, dtype=torch.bool, device=device).unsqueeze(0)
    return QueryBatch(
        embeddings=embeddings,
        attn_mask=~allowed,
        tags=tags,
        provenance=provenance,
        num_matched=K,
    )


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_block = SelfAttentionBlock(d, heads, ffn_dim, dropout)
        self.cross_block = CrossAttentionBlock(d, heads, ffn_dim, dropout)
        self.heads = heads

    def forward(self, x, memory, mem_pos, attn_mask):
        x = self.self_block(x, attn_mask=expand_attn_mask(attn_mask, self.heads))
        return self.cross_block(x, memory, mem_pos=mem_pos)


class MomentDecoder(nn.Module):
    """Decoder stack plus shared span/foreground heads applied per layer."""

    def __init__(self, d: int, heads: int, layers: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            DecoderBlock(d, heads, ffn_dim, dropout) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(d)
        self.span_head = SpanMLP(d)
        self.fg_head = nn.Linear(d, 2)

    def forward(self, queries: QueryBatch, x_s: torch.Tensor, memory: torch.Tensor,
                mem_pos: torch.Tensor):
        """Decode against [x_s; memory].

        Returns (layer_spans, layer_logits): per-layer lists of B x N x 2
        tensors, final layer last.
        """
        if queries.attn_mask.shape[1] != queries.embeddings.shape[1]:
            raise ShapeError("attention mask does not match query rows")
        mem = torch.cat([x_s.unsqueeze(1), memory], dim=1)  # B x (1+L) x d
        x = queries.embeddings
        layer_spans, layer_logits = [], []
        for block in self.blocks:
            x = block(x, mem, mem_pos, queries.attn_mask)
            h = self.final_norm(x)
            layer_spans.append(self.span_head(h))
            layer_logits.append(self.fg_head(h))
        return layer_spans, layer_logits
