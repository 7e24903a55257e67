"""Small UNet noise predictor with three injection surfaces.

Every block is ``ResBlock -> attention``.  After a block, in this order:
an additive identity residual (if given) and a temporal attention layer
(if given).  Hair features only enter through cross-attention inside the
block's attention layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from ..config import ModelConfig
from ..errors import ShapeError


@dataclass(frozen=True)
class BlockSpec:
    key: str
    stage: str
    level: int
    block: int
    channels: int
    size: int


def block_layout(cfg: ModelConfig) -> list[BlockSpec]:
    """Down blocks, the middle block, then up blocks (deepest level first)."""
    levels = len(cfg.channel_mults)
    out = []
    for level, mult in enumerate(cfg.channel_mults):
        for b in range(cfg.blocks_per_level):
            out.append(
                BlockSpec(f"down_{level}_{b}", "down", level, b, cfg.base_channels * mult, cfg.latent_size >> level)
            )
    deepest = levels - 1
    out.append(
        BlockSpec(
            "mid", "mid", deepest, 0, cfg.base_channels * cfg.channel_mults[-1], cfg.latent_size >> deepest
        )
    )
    for level in reversed(range(levels)):
        for b in range(cfg.blocks_per_level):
            out.append(
                BlockSpec(
                    f"up_{level}_{b}", "up", level, b, cfg.base_channels * cfg.channel_mults[level], cfg.latent_size >> level
                )
            )
    return out


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.view(b, n, heads, c // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic softmax(q k^T / sqrt(d)); q (..., n, d), k (..., m, d)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v via the fused kernel; same math as ``attention_weights``."""
    return F.scaled_dot_product_attention(q, k, v)


class TimeMLP(nn.Module):
    def __init__(self, embed_dim: int, width: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, e_f: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(e_f)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_width: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_width, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


HairFn = Callable[[torch.Tensor], torch.Tensor]


class SpatialAttention(nn.Module):
    """Self-attention over H*W tokens plus a feed-forward layer.

    ``hair`` receives the per-head queries and returns a (B, N, C) term added
    to the self-attention output before the residual.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.ff_norm = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def forward(self, x: torch.Tensor, hair: HairFn | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        normed = self.norm(x).flatten(2).transpose(1, 2)
        q = split_heads(self.q(normed), self.heads)
        k = split_heads(self.k(normed), self.heads)
        v = split_heads(self.v(normed), self.heads)
        out = self.out(merge_heads(attend(q, k, v)))
        if hair is not None:
            out = out + hair(q)
        tokens = tokens + out
        tokens = tokens + self.ff(self.ff_norm(tokens))
        return tokens.transpose(1, 2).reshape(b, c, h, w), tokens


class Block(nn.Module):
    def __init__(self, cin: int, cout: int, emb_width: int, heads: int):
        super().__init__()
        self.res = ResBlock(cin, cout, emb_width)
        self.attn = SpatialAttention(cout, heads)

    def forward(self, x, emb, hair: HairFn | None = None):
        return self.attn(self.res(x, emb), hair)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class Encoder(nn.Module):
    """Down path plus middle block; shared by the UNet and the identity branch."""

    def __init__(self, cfg: ModelConfig, emb_width: int):
        super().__init__()
        self.layout = [s for s in block_layout(cfg) if s.stage in ("down", "mid")]
        self.blocks = nn.ModuleDict()
        self.downs = nn.ModuleDict()
        ch = cfg.base_channels
        for spec in self.layout:
            self.blocks[spec.key] = Block(ch, spec.channels, emb_width, cfg.heads)
            ch = spec.channels
            last_of_level = spec.stage == "down" and spec.block == cfg.blocks_per_level - 1
            if last_of_level and spec.level < len(cfg.channel_mults) - 1:
                self.downs[str(spec.level)] = Downsample(ch)


def _check_map(name: str, given: Mapping[str, torch.Tensor] | None, specs: list[BlockSpec]):
    if given is None:
        return
    expected = {s.key for s in specs}
    extra = set(given) - expected
    if extra:
        raise ShapeError(f"{name}: unknown block key(s) {sorted(extra)}")


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig, head: bool = True):
        super().__init__()
        self.cfg = cfg
        self.layout = block_layout(cfg)
        emb_width = 4 * cfg.base_channels
        self.time_mlp = TimeMLP(cfg.embed_dim, emb_width)
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.encoder = Encoder(cfg, emb_width)
        self.up_blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        ch = self.layout[len(self.encoder.layout) - 1].channels
        for spec in self.layout:
            if spec.stage != "up":
                continue
            skip = spec.channels
            self.up_blocks[spec.key] = Block(ch + skip, spec.channels, emb_width, cfg.heads)
            ch = spec.channels
            if spec.block == cfg.blocks_per_level - 1 and spec.level > 0:
                self.ups[str(spec.level)] = Upsample(ch)
        self.has_head = head
        if head:
            self.norm_out = nn.GroupNorm(8, ch)
            # zero init: the freshly built model predicts eps = 0 (loss ~1 at step 0)
            self.conv_out = zero_module(nn.Conv2d(ch, cfg.in_channels, 3, padding=1))

    def _block(self, key, block, h, emb, residuals, hair_layers, hair_bank, temporal, frames, harvest):
        hair_fn = None
        if hair_layers is not None and hair_bank is not None:
            layer, bank = hair_layers[key], hair_bank[key]
            hair_fn = lambda q: layer(q, bank)  # noqa: E731
        h, tokens = block(h, emb, hair_fn)
        if harvest is not None:
            harvest[key] = tokens
        if residuals is not None and key in residuals:
            r = residuals[key]
            if r.shape != h.shape:
                raise ShapeError(f"residual for block {key}: expected {tuple(h.shape)}, got {tuple(r.shape)}")
            h = h + r
        if temporal is not None:
            h = temporal[key](h, frames)
        return h

    def forward(
        self,
        z_t: torch.Tensor,
        e_f: torch.Tensor,
        residuals: Mapping[str, torch.Tensor] | None = None,
        hair_layers: Mapping[str, nn.Module] | None = None,
        hair_bank: Mapping[str, torch.Tensor] | None = None,
        temporal: Mapping[str, nn.Module] | None = None,
        frames: int = 1,
        harvest: dict | None = None,
    ) -> torch.Tensor:
        if z_t.dim() != 4 or z_t.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"denoise expects (B, {self.cfg.in_channels}, H, W), got {tuple(z_t.shape)}")
        if e_f.shape != (z_t.shape[0], self.cfg.embed_dim):
            raise ShapeError(f"embedding shape {tuple(e_f.shape)} does not match batch {z_t.shape[0]}")
        _check_map("residuals", residuals, self.layout)
        _check_map("hair bank", hair_bank, self.layout)
        if hair_bank is not None:
            missing = {s.key for s in self.layout} - set(hair_bank)
            if missing:
                raise ShapeError(f"hair bank missing block(s) {sorted(missing)}")
        emb = self.time_mlp(e_f)
        h = self.conv_in(z_t)
        skips = []
        enc = self.encoder
        args = (emb, residuals, hair_layers, hair_bank, temporal, frames, harvest)
        for spec in enc.layout:
            h = self._block(spec.key, enc.blocks[spec.key], h, *args)
            if spec.stage == "down":
                skips.append(h)
                if str(spec.level) in enc.downs and spec.block == self.cfg.blocks_per_level - 1:
                    h = enc.downs[str(spec.level)](h)
        for spec in self.layout:
            if spec.stage != "up":
                continue
            h = torch.cat([h, skips.pop()], dim=1)
            h = self._block(spec.key, self.up_blocks[spec.key], h, *args)
            if str(spec.level) in self.ups and spec.block == self.cfg.blocks_per_level - 1:
                h = self.ups[str(spec.level)](h)
        if not self.has_head:
            return h
        return self.conv_out(F.silu(self.norm_out(h)))
