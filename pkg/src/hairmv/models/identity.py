"""Pose-controllable latent identity branch.

A trainable copy of the UNet encoder.  The condition image enters in latent
space: its latent goes through a learned projection and is added to the
projected noisy latent at the branch input.  One zero-initialised 1x1
projection per backbone block turns branch features at that block's
resolution into the residual the backbone adds after the block.
"""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from ..errors import ShapeError
from .backbone import Encoder, TimeMLP, block_layout, zero_module


class PixelConditioner(nn.Module):
    """Ablation input path: raw pixels downsampled by strided convs to latent size."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(cfg.image_channels, 16, 3, padding=1), nn.SiLU()]
        f = cfg.codec_factor
        while f > 1:
            layers += [nn.Conv2d(16, 16, 3, stride=2, padding=1), nn.SiLU()]
            f //= 2
        layers.append(nn.Conv2d(16, cfg.base_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image):
        return self.net(image)


class IdentityNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layout = block_layout(cfg)
        emb_width = 4 * cfg.base_channels
        self.time_mlp = TimeMLP(cfg.embed_dim, emb_width)
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        if cfg.cond_space == "latent":
            self.cond_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        else:
            self.cond_in = PixelConditioner(cfg)
        self.encoder = Encoder(cfg, emb_width)
        self.proj = nn.ModuleDict(
            {s.key: zero_module(nn.Conv2d(s.channels, s.channels, 1)) for s in self.layout}
        )

    def forward(self, cond: torch.Tensor, z_t: torch.Tensor, e_f: torch.Tensor) -> dict[str, torch.Tensor]:
        """``cond`` is the encoded condition latent (or the pixel image in the ablation)."""
        if self.cfg.cond_space == "latent":
            if cond.shape != z_t.shape:
                raise ShapeError(
                    f"condition latent {tuple(cond.shape)} must match noisy latent {tuple(z_t.shape)}"
                )
        else:
            f = self.cfg.codec_factor
            want = (z_t.shape[0], self.cfg.image_channels, z_t.shape[2] * f, z_t.shape[3] * f)
            if tuple(cond.shape) != want:
                raise ShapeError(f"pixel condition must be {want}, got {tuple(cond.shape)}")
        emb = self.time_mlp(e_f)
        cond_feat = self.cond_in(cond)
        # structural guarantee that the branch never runs at pixel resolution
        assert cond_feat.shape[-2:] == z_t.shape[-2:]
        h = self.conv_in(z_t) + cond_feat
        per_level: dict[int, torch.Tensor] = {}
        enc = self.encoder
        mid = None
        for spec in enc.layout:
            h, _ = enc.blocks[spec.key](h, emb)
            if spec.stage == "down":
                per_level[spec.level] = h
                if str(spec.level) in enc.downs and spec.block == self.cfg.blocks_per_level - 1:
                    h = enc.downs[str(spec.level)](h)
            else:
                mid = h
        out = {}
        for spec in self.layout:
            src = mid if spec.stage == "mid" else per_level[spec.level]
            out[spec.key] = self.proj[spec.key](src)
        return out
