"""Temporal self-attention across the frame axis, one layer after every backbone block."""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from ..errors import ShapeError
from ..pose import sinusoidal_embed
from .backbone import attend, block_layout, merge_heads, split_heads, zero_module


class TemporalAttention(nn.Module):
    """Input (B*F, C, H, W) with frames contiguous per sequence.

    Each spatial location attends only over its own F frames.  A single frame
    is returned untouched.
    """

    def __init__(self, channels: int, heads: int, max_frames: int, use_position: bool = True):
        super().__init__()
        self.heads = heads
        self.max_frames = max_frames
        self.use_position = use_position
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = zero_module(nn.Linear(channels, channels))
        self.register_buffer(
            "position", sinusoidal_embed(torch.arange(max_frames, dtype=torch.float64), channels).float(), persistent=False
        )

    def forward(self, h: torch.Tensor, frames: int) -> torch.Tensor:
        if frames > self.max_frames:
            raise ShapeError(f"sequence of {frames} frames exceeds max_frames={self.max_frames}")
        if frames <= 1:
            return h
        bf, c, hh, ww = h.shape
        if bf % frames:
            raise ShapeError(f"batch {bf} is not a multiple of frames={frames}")
        b = bf // frames
        x = h.reshape(b, frames, c, hh, ww).permute(0, 3, 4, 1, 2).reshape(b * hh * ww, frames, c)
        y = self.norm(x)
        if self.use_position:
            y = y + self.position[:frames].to(y.dtype)
        q = split_heads(self.q(y), self.heads)
        k = split_heads(self.k(y), self.heads)
        v = split_heads(self.v(y), self.heads)
        x = x + self.out(merge_heads(attend(q, k, v)))
        return x.reshape(b, hh, ww, frames, c).permute(0, 3, 4, 1, 2).reshape(bf, c, hh, ww)


class TemporalStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleDict(
            {s.key: TemporalAttention(s.channels, cfg.heads, cfg.max_frames) for s in block_layout(cfg)}
        )

    def __getitem__(self, key):
        return self.layers[key]
