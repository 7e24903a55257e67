"""Shared builders for model tests."""

from __future__ import annotations

import torch

from hairmv.config import ModelConfig
from hairmv.models import HairTransferModel, block_layout


def wake(model: torch.nn.Module, seed: int = 0, scale: float = 0.1) -> torch.nn.Module:
    """Overwrite every all-zero parameter with small noise so zero-init paths carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if not p.any():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def inputs(cfg: ModelConfig, batch: int, seed: int = 0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    n = cfg.latent_size
    z = torch.randn(batch, cfg.in_channels, n, n, generator=g, dtype=dtype)
    cond = torch.randn(batch, cfg.in_channels, n, n, generator=g, dtype=dtype)
    ref = torch.randn(batch, cfg.in_channels, n, n, generator=g, dtype=dtype)
    eps = torch.randn(batch, cfg.in_channels, n, n, generator=g, dtype=dtype)
    t = torch.randint(1000, (batch,), generator=g)
    poses = torch.stack([torch.zeros(batch), torch.rand(batch, generator=g) * 6, torch.rand(batch, generator=g) * 0.1], 1)
    return z, cond, ref, eps, t, poses


def full_loss(model: HairTransferModel, batch, frames: int = 1, keep=None) -> torch.Tensor:
    """Epsilon MSE through every pathway: identity residuals, hair bank, temporal layers."""
    z, cond, ref, eps, t, poses = batch
    e_f = model.embed(t, poses)
    bank = model.extract_reference_features(ref)
    if keep is not None:
        bank = model.hair.select(keep, bank, model.hair.null_bank(z.shape[0]))
    out = model(z, e_f, cond=cond, bank=bank, temporal=frames > 1, frames=frames)
    return torch.mean((out - eps) ** 2)


def layout_keys(cfg: ModelConfig) -> list[str]:
    return [s.key for s in block_layout(cfg)]
