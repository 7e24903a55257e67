"""Reference-hair pathway: the extractor UNet, hair cross-attention and the null bank."""

from __future__ import annotations

import torch
from torch import nn

from ..config import ModelConfig
from ..errors import ShapeError
from .backbone import UNet, attend, attention_weights, block_layout, merge_heads, split_heads, zero_module

HairFeatureBank = dict[str, torch.Tensor]


class HairCrossAttention(nn.Module):
    """Keys and values from reference tokens, queries shared with the block's self-attention.

    Reference tokens carry no positional encoding, so the output is invariant
    to their order.  The output projection starts at zero.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.channels = channels
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = zero_module(nn.Linear(channels, channels))

    def _kv(self, bank: torch.Tensor):
        if bank.dim() != 3 or bank.shape[-1] != self.channels:
            raise ShapeError(f"bank entry must be (B, M, {self.channels}), got {tuple(bank.shape)}")
        ref = self.norm(bank)
        return split_heads(self.k(ref), self.heads), split_heads(self.v(ref), self.heads)

    def weights(self, q: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
        k, _ = self._kv(bank)
        return attention_weights(q, k)

    def forward(self, q: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
        if q.shape[0] != bank.shape[0]:
            raise ShapeError(f"query batch {q.shape[0]} != bank batch {bank.shape[0]}")
        k, v = self._kv(bank)
        return self.out(merge_heads(attend(q, k, v)))


class HairPathway(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layout = block_layout(cfg)
        self.extractor = UNet(cfg, head=False)
        self.cross = nn.ModuleDict({s.key: HairCrossAttention(s.channels, cfg.heads) for s in self.layout})
        # learned stand-in for "no reference", token-for-token the shape of a real bank entry
        self.null = nn.ParameterDict(
            {s.key: nn.Parameter(torch.zeros(s.size * s.size, s.channels)) for s in self.layout}
        )

    def init_extractor_from(self, backbone: UNet) -> None:
        """Copy every matching backbone weight into the extractor."""
        src = backbone.state_dict()
        own = self.extractor.state_dict()
        own.update({k: v.clone() for k, v in src.items() if k in own})
        self.extractor.load_state_dict(own)

    def extract(self, ref_latent: torch.Tensor, e_f: torch.Tensor) -> HairFeatureBank:
        bank: HairFeatureBank = {}
        self.extractor(ref_latent, e_f, harvest=bank)
        return bank

    def null_bank(self, batch: int) -> HairFeatureBank:
        return {k: p[None].expand(batch, -1, -1) for k, p in self.null.items()}

    @staticmethod
    def select(keep: torch.Tensor, bank: HairFeatureBank, null: HairFeatureBank) -> HairFeatureBank:
        """Per-sample choice between a real bank (keep=True) and the null bank."""
        k = keep.view(-1, 1, 1)
        return {key: torch.where(k, bank[key], null[key]) for key in bank}
