"""Full grounding network: encoder, salience head, guided queries, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from ..errors import ConfigError
from .decoder import DenoiseRows, MomentDecoder, QueryBatch, build_query_batch, combine_queries
from .encoder import VideoTextEncoder
from .saliency import AuxSpanLayer, GuidedQueries, SalienceHead, build_guided_queries


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    tower_layers: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 0  # 0 -> 4*d
    d_motion: int = 32
    d_semantic: int = 32
    d_text: int = 32
    num_queries: int = 10
    L_max: int = 512
    dropout: float = 0.1
    guided_queries: bool = True

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4 != 0:
            raise ConfigError(f"d={self.d} must be divisible by 4 for span encoding")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d


@dataclass
class ModelOutputs:
    x_s: torch.Tensor  # B x d
    memory: torch.Tensor  # B x L x d
    fused: torch.Tensor  # B x L x d
    scores: torch.Tensor  # B x L raw salience
    guided: GuidedQueries | None
    queries: QueryBatch
    layer_spans: list[torch.Tensor] = field(default_factory=list)  # each B x N x 2
    layer_logits: list[torch.Tensor] = field(default_factory=list)  # each B x N x 2

    @property
    def num_matched(self) -> int:
        return self.queries.num_matched

    def matched_spans(self, layer: int = -1) -> torch.Tensor:
        return self.layer_spans[layer][:, : self.num_matched]

    def matched_logits(self, layer: int = -1) -> torch.Tensor:
        return self.layer_logits[layer][:, : self.num_matched]


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = VideoTextEncoder(
            d=cfg.d, heads=cfg.heads, tower_layers=cfg.tower_layers,
            encoder_layers=cfg.encoder_layers, ffn_dim=cfg.ffn_dim,
            dropout=cfg.dropout, d_motion=cfg.d_motion, d_semantic=cfg.d_semantic,
            d_text=cfg.d_text, L_max=cfg.L_max,
        )
        self.salience = SalienceHead(cfg.d)
        self.aux_span = AuxSpanLayer(cfg.d)
        self.decoder = MomentDecoder(cfg.d, cfg.heads, cfg.decoder_layers,
                                     cfg.ffn_dim, cfg.dropout)
        # Input-agnostic queries, used when salience guidance is disabled.
        self.free_queries = nn.Parameter(torch.empty(cfg.num_queries, cfg.d))
        nn.init.normal_(self.free_queries, std=0.02)

    def encode_pair(self, motion, semantic, text, text_padding_mask=None):
        """Encoder plus salience scores only (used for negative pairs).

        Returns (x_s B x d, memory B x L x d, fused B x L x d, scores B x L).
        """
        x_s, memory, fused = self.encoder(motion, semantic, text, text_padding_mask)
        return x_s, memory, fused, self.salience(x_s, memory)

    def forward(self, motion, semantic, text, text_padding_mask=None,
                dn_rows: list[DenoiseRows] | None = None) -> ModelOutputs:
        x_s, memory, fused, scores = self.encode_pair(
            motion, semantic, text, text_padding_mask)
        B, L, _ = memory.shape

        guided = None
        if self.cfg.guided_queries:
            guided = build_guided_queries(memory, scores, self.cfg.num_queries,
                                          self.aux_span)
            matched = combine_queries(guided.content, guided.pos)
        else:
            matched = self.free_queries.to(memory.dtype).expand(B, -1, -1)

        queries = build_query_batch(matched, dn_rows)
        mem_pos = self.encoder.memory_positions(L, memory).unsqueeze(0)
        layer_spans, layer_logits = self.decoder(queries, x_s, memory, mem_pos)
        return ModelOutputs(
            x_s=x_s, memory=memory, fused=fused, scores=scores, guided=guided,
            queries=queries, layer_spans=layer_spans, layer_logits=layer_logits,
        )
