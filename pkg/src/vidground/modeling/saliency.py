"""Highlight head and the salience-guided decoder query construction:
bilinear clip scoring, top-K content query selection, auxiliary reference
spans, and their sinusoidal position queries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .layers import SpanMLP, encode_span_positions


@dataclass
class GuidedQueries:
    """Decoder inputs derived from salience: content rows, their clip
    indices, reference spans, and position queries."""

    content: torch.Tensor  # B x K x d
    indices: torch.Tensor  # B x K clip indices (0-based)
    ref_spans: torch.Tensor  # B x K x 2 (center, span) in (0, 1)
    pos: torch.Tensor  # B x K x d
    padded: bool  # True when L < K and indices cycle


class SalienceHead(nn.Module):
    """Bilinear salience score S(x_i) = (w_s . x_s)(w_v . x_i) / sqrt(d)."""

    def __init__(self, d: int):
        super().__init__()
        self.w_s = nn.Parameter(torch.empty(d))
        self.w_v = nn.Parameter(torch.empty(d))
        nn.init.normal_(self.w_s, std=0.02)
        nn.init.normal_(self.w_v, std=0.02)

    def forward(self, x_s: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        # x_s: B x d, memory: B x L x d -> raw scores B x L (no sigmoid)
        d = memory.shape[-1]
        return (x_s * self.w_s).sum(-1, keepdim=True) * (memory @ self.w_v) / math.sqrt(d)


def select_content_queries(memory: torch.Tensor, scores: torch.Tensor,
                           K: int) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Pick the K highest-scoring memory rows as content queries.

    Ties break toward the lower clip index; when L < K the sorted order is
    cycled so K stays fixed (flagged via the returned bool).
    Returns (content B x K x d, indices B x K, padded).
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    B, L, d = memory.shape
    order = torch.argsort(scores, dim=1, descending=True, stable=True)  # B x L
    padded = L < K
    if padded:
        reps = -(-K // L)
        order = order.repeat(1, reps)
    indices = order[:, :K]
    content = memory.gather(1, indices.unsqueeze(-1).expand(B, K, d))
    return content, indices, padded


class AuxSpanLayer(nn.Module):
    """Span head for selected clips; same structure as the moment prediction
    head but with its own parameters."""

    def __init__(self, d: int):
        super().__init__()
        self.mlp = SpanMLP(d)

    def forward(self, content: torch.Tensor) -> torch.Tensor:
        # content: B x K x d -> reference spans B x K x 2 in (0, 1)
        return self.mlp(content)


def build_guided_queries(memory: torch.Tensor, scores: torch.Tensor, K: int,
                         aux_span: AuxSpanLayer) -> GuidedQueries:
    content, indices, padded = select_content_queries(memory, scores, K)
    ref = aux_span(content)
    pos = encode_span_positions(ref, memory.shape[-1])
    return GuidedQueries(content=content, indices=indices, ref_spans=ref,
                         pos=pos, padded=padded)
