"""Invertible image <-> latent transform.

Images are (..., c, H, W) in [0, 1].  Encoding is space-to-depth by ``f``,
a fixed orthogonal channel mix and an affine shift that maps mid-grey to
zero; decoding is the exact inverse.  All of it is linear, so roundtrips
are exact up to float rounding.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ShapeError

SHIFT = 0.5
SCALE = 2.0


def orthogonal_mixing(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    # sign fix makes the factorization unique
    return q * np.sign(np.diag(r))[None, :]


def space_to_depth(x: torch.Tensor, f: int) -> torch.Tensor:
    *lead, c, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"spatial size {h}x{w} not divisible by codec factor {f}")
    x = x.reshape(*lead, c, h // f, f, w // f, f)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return x.reshape(*lead, c * f * f, h // f, w // f)


def depth_to_space(z: torch.Tensor, f: int, c: int) -> torch.Tensor:
    *lead, cz, h, w = z.shape
    if cz != c * f * f:
        raise ShapeError(f"latent has {cz} channels, codec expects {c * f * f}")
    z = z.reshape(*lead, c, f, f, h, w)
    n = len(lead)
    z = z.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return z.reshape(*lead, c, h * f, w * f)


class LatentCodec:
    def __init__(self, factor: int = 2, seed: int = 1234, channels: int = 3):
        if factor < 1:
            raise ShapeError("codec factor must be positive")
        self.factor = int(factor)
        self.seed = int(seed)
        self.channels = int(channels)
        self.mixing = orthogonal_mixing(channels * factor * factor, seed)

    @property
    def latent_channels(self) -> int:
        return self.channels * self.factor**2

    def _m(self, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.mixing, dtype=like.dtype, device=like.device)

    def mix(self, s: torch.Tensor) -> torch.Tensor:
        return torch.einsum("kj,...jhw->...khw", self._m(s), s)

    def unmix(self, z: torch.Tensor) -> torch.Tensor:
        return torch.einsum("jk,...jhw->...khw", self._m(z), z)

    def encode(self, image) -> torch.Tensor:
        image = torch.as_tensor(image)
        if not torch.is_floating_point(image):
            raise ShapeError("encode expects a floating-point image in [0, 1]")
        if image.dim() < 3 or image.shape[-3] != self.channels:
            raise ShapeError(f"encode expects (..., {self.channels}, H, W), got {tuple(image.shape)}")
        s = space_to_depth(image, self.factor)
        # mixing is linear, so shifting before it equals shifting the mixed output
        return SCALE * self.mix(s - SHIFT)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() < 3 or latent.shape[-3] != self.latent_channels:
            raise ShapeError(
                f"decode expects {self.latent_channels} latent channels, got {tuple(latent.shape)}"
            )
        s = self.unmix(latent / SCALE) + SHIFT
        return depth_to_space(s, self.factor, self.channels)

    def meta(self) -> dict:
        return {"factor": self.factor, "seed": self.seed, "channels": self.channels}
