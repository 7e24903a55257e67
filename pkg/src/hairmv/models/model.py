"""The full noise predictor and its parameter namespaces.

Namespaces are the top-level submodules: ``backbone``, ``identity``,
``hair`` and ``temporal``.  They partition the parameter set, which is what
the stage freeze contracts operate on.
"""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from ..pose import fuse_pose_time
from .backbone import UNet, block_layout
from .hair import HairFeatureBank, HairPathway
from .identity import IdentityNet
from .temporal import TemporalStack

NAMESPACES = ("backbone", "identity", "hair", "temporal")


class HairTransferModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = UNet(cfg)
        self.identity = IdentityNet(cfg)
        self.hair = HairPathway(cfg)
        self.temporal = TemporalStack(cfg)

    @property
    def layout(self):
        return block_layout(self.cfg)

    def embed(self, t: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        """``t`` (B,), ``poses`` (B, 3) as (polar, azimuth, pose_noise)."""
        dtype = next(self.parameters()).dtype
        poses = poses.to(torch.float64)
        e = fuse_pose_time(
            t.to(torch.float64), poses[:, 0], poses[:, 1], poses[:, 2], self.cfg.embed_dim, torch.float64
        )
        return e.to(dtype)

    def identity_residuals(self, cond: torch.Tensor, z_t: torch.Tensor, e_f: torch.Tensor):
        return self.identity(cond, z_t, e_f)

    def extract_reference_features(self, ref_latent: torch.Tensor) -> HairFeatureBank:
        """Extractor runs on the clean reference at timestep 0 with a zero pose."""
        b = ref_latent.shape[0]
        e_f = self.embed(torch.zeros(b), torch.zeros(b, 3))
        return self.hair.extract(ref_latent, e_f)

    def forward(
        self,
        z_t: torch.Tensor,
        e_f: torch.Tensor,
        cond: torch.Tensor | None = None,
        bank: HairFeatureBank | None = None,
        temporal: bool = False,
        frames: int = 1,
        residuals: dict | None = None,
    ) -> torch.Tensor:
        """Predict eps.  ``cond`` feeds the identity branch; ``bank`` the hair cross-attention."""
        if residuals is None and cond is not None:
            residuals = self.identity(cond, z_t, e_f)
        return self.backbone(
            z_t,
            e_f,
            residuals=residuals,
            hair_layers=self.hair.cross if bank is not None else None,
            hair_bank=bank,
            temporal=self.temporal if temporal else None,
            frames=frames,
        )

    def namespace_parameters(self) -> dict[str, dict[str, nn.Parameter]]:
        out: dict[str, dict[str, nn.Parameter]] = {ns: {} for ns in NAMESPACES}
        for name, p in self.named_parameters():
            out[name.split(".", 1)[0]][name] = p
        return out
