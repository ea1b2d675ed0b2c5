"""Disentangled video-text encoder.

Two cross-modal towers attend the motion and semantic clip streams over
the query words separately, a learned 2d->d map fuses them, and a
self-attention stack over [salience token; fused clips] yields the
salience-token output x_s plus per-clip memory.  Text tokens carry no
positional encoding inside the towers, so both towers are order-invariant
over words; clips carry sinusoidal index positions.
"""

from __future__ import annotations

import torch
from torch import nn

from ..errors import InputError, ShapeError
from .layers import CrossAttentionBlock, SelfAttentionBlock, sinusoidal_clip_positions


class CrossModalTower(nn.Module):
    """Stack of cross-attention blocks: clip queries over word keys/values."""

    def __init__(self, d: int, heads: int, layers: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(d, heads, ffn_dim, dropout) for _ in range(layers)
        )

    def forward(self, clips, words, clip_pos, word_padding_mask=None):
        # clips: B x L x d, words: B x M x d
        if words.shape[1] == 0:
            raise InputError("cross-modal tower needs at least one text token")
        x = clips
        for block in self.blocks:
            x = block(x, words, q_pos=clip_pos, mem_padding_mask=word_padding_mask)
        return x


class VideoTextEncoder(nn.Module):
    def __init__(self, d: int, heads: int, tower_layers: int, encoder_layers: int,
                 ffn_dim: int, dropout: float, d_motion: int, d_semantic: int,
                 d_text: int, L_max: int):
        super().__init__()
        self.d = d
        self.L_max = L_max
        self.motion_proj = nn.Linear(d_motion, d)
        self.semantic_proj = nn.Linear(d_semantic, d)
        self.text_proj = nn.Linear(d_text, d)
        self.motion_tower = CrossModalTower(d, heads, tower_layers, ffn_dim, dropout)
        self.semantic_tower = CrossModalTower(d, heads, tower_layers, ffn_dim, dropout)
        self.fuse_proj = nn.Linear(2 * d, d)
        self.salience_token = nn.Parameter(torch.empty(d))
        self.salience_pos = nn.Parameter(torch.empty(d))
        nn.init.normal_(self.salience_token, std=0.02)
        nn.init.normal_(self.salience_pos, std=0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(d, heads, ffn_dim, dropout) for _ in range(encoder_layers)
        )
        self.final_norm = nn.LayerNorm(d)

    def clip_positions(self, L: int, like: torch.Tensor) -> torch.Tensor:
        return sinusoidal_clip_positions(L, self.d, dtype=like.dtype, device=like.device)

    def fuse(self, motion_out: torch.Tensor, semantic_out: torch.Tensor) -> torch.Tensor:
        """Concatenate the two tower outputs along features and map 2d -> d."""
        if motion_out.shape[:-1] != semantic_out.shape[:-1]:
            raise ShapeError(
                f"tower outputs disagree: {tuple(motion_out.shape)} vs "
                f"{tuple(semantic_out.shape)}"
            )
        return self.fuse_proj(torch.cat([motion_out, semantic_out], dim=-1))

    def run_towers(self, motion, semantic, text, text_padding_mask=None):
        """Project the three streams and fuse the two cross-modal towers.

        motion: B x L x d_m, semantic: B x L x d_s, text: B x M x d_t.
        Returns fused clip features B x L x d.
        """
        q_m = self.motion_proj(motion)
        q_s = self.semantic_proj(semantic)
        words = self.text_proj(text)
        clip_pos = self.clip_positions(q_m.shape[1], q_m)
        out_m = self.motion_tower(q_m, words, clip_pos, text_padding_mask)
        out_s = self.semantic_tower(q_s, words, clip_pos, text_padding_mask)
        return self.fuse(out_m, out_s)

    def encode(self, fused: torch.Tensor, clip_pos: torch.Tensor | None = None):
        """Self-attention over [salience token; fused clips].

        Clip positions are added into the input stream (not just attention
        queries/keys) so each memory row carries its own location; the
        reference-span head reads absolute positions back out of rows.
        Returns (x_s: B x d, memory: B x L x d).
        """
        B, L, _ = fused.shape
        if L > self.L_max:
            raise InputError(f"L={L} exceeds L_max={self.L_max}")
        if clip_pos is None:
            clip_pos = self.clip_positions(L, fused)
        token = (self.salience_token + self.salience_pos).to(fused.dtype)
        x = torch.cat([token.expand(B, 1, -1), fused + clip_pos], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return x[:, 0], x[:, 1:]

    def forward(self, motion, semantic, text, text_padding_mask=None):
        """Full pass: towers -> fusion -> encoder stack.

        Returns (x_s B x d, memory B x L x d, fused B x L x d).
        """
        fused = self.run_towers(motion, semantic, text, text_padding_mask)
        x_s, memory = self.encode(fused)
        return x_s, memory, fused

    def memory_positions(self, L: int, like: torch.Tensor) -> torch.Tensor:
        """Positions for [x_s; memory] as decoder cross-attention keys: 1+L x d."""
        clip_pos = self.clip_positions(L, like)
        return torch.cat([self.salience_pos.to(like.dtype).unsqueeze(0), clip_pos], dim=0)
