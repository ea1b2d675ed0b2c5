"""Shared building blocks: pre-norm attention blocks, MLP heads, and the
sinusoidal encodings for clip indices and normalized spans."""

from __future__ import annotations

import math

import torch
from torch import nn

from ..errors import ConfigError


def sinusoidal_clip_positions(L: int, d: int, dtype=torch.float64,
                              device=None) -> torch.Tensor:
    """L x d sine/cosine embedding of clip indices (standard transformer PE)."""
    pos = torch.arange(L, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, d, 2, dtype=dtype, device=device)
    freq = torch.exp(-math.log(10000.0) * idx / d)
    out = torch.zeros(L, d, dtype=dtype, device=device)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq)
    return out


def encode_span_positions(spans: torch.Tensor, d: int) -> torch.Tensor:
    """Map normalized (center, span) pairs to d-dim sinusoidal position queries.

    Each scalar gets d/2 dims: a d/4 sine block at frequencies
    10000^(2i/(d/2)) followed by a d/4 cosine block at 10000^((2i+1)/(d/2)),
    center block first.  spans: (..., 2) -> (..., d).
    """
    if d % 4 != 0:
        raise ConfigError(f"span position encoding needs d divisible by 4, got {d}")
    half = d // 2
    quarter = d // 4
    i = torch.arange(quarter, dtype=spans.dtype, device=spans.device)
    sin_scale = torch.pow(torch.tensor(10000.0, dtype=spans.dtype, device=spans.device),
                          2 * i / half)
    cos_scale = torch.pow(torch.tensor(10000.0, dtype=spans.dtype, device=spans.device),
                          (2 * i + 1) / half)

    def block(r: torch.Tensor) -> torch.Tensor:
        ang = 2 * math.pi * r.unsqueeze(-1)
        return torch.cat([torch.sin(ang / sin_scale), torch.cos(ang / cos_scale)], dim=-1)

    return torch.cat([block(spans[..., 0]), block(spans[..., 1])], dim=-1)


class FeedForward(nn.Module):
    def __init__(self, d: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.linear1 = nn.Linear(d, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.linear2(self.dropout(torch.relu(self.linear1(x))))


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention + feed-forward, positions added to q/k only."""

    def __init__(self, d: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim, dropout)
        self.drop_attn = nn.Dropout(dropout)
        self.drop_ffn = nn.Dropout(dropout)

    def forward(self, x, mem, q_pos=None, mem_pos=None, mem_padding_mask=None):
        q = self.norm_q(x)
        if q_pos is not None:
            q = q + q_pos
        k = mem if mem_pos is None else mem + mem_pos
        out, _ = self.attn(q, k, mem, key_padding_mask=mem_padding_mask,
                           need_weights=False)
        x = x + self.drop_attn(out)
        x = x + self.drop_ffn(self.ffn(self.norm_ffn(x)))
        return x


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + feed-forward with optional attention mask."""

    def __init__(self, d: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim, dropout)
        self.drop_attn = nn.Dropout(dropout)
        self.drop_ffn = nn.Dropout(dropout)

    def forward(self, x, pos=None, attn_mask=None):
        a = self.norm_attn(x)
        qk = a if pos is None else a + pos
        out, _ = self.attn(qk, qk, a, attn_mask=attn_mask, need_weights=False)
        x = x + self.drop_attn(out)
        x = x + self.drop_ffn(self.ffn(self.norm_ffn(x)))
        return x


class SpanMLP(nn.Module):
    """3-layer span head d -> d -> d -> 2 with sigmoid output in (0, 1)^2."""

    def __init__(self, d: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(),
            nn.Linear(d, d), nn.ReLU(),
            nn.Linear(d, 2),
        )

    def forward(self, x):
        return torch.sigmoid(self.layers(x))


def expand_attn_mask(mask: torch.Tensor, heads: int) -> torch.Tensor:
    """B x N x N bool mask (True = blocked) -> (B*heads) x N x N for MHA."""
    return mask.repeat_interleave(heads, dim=0)
