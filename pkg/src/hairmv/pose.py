"""Camera poses, sinusoidal embeddings and the pose/time fusion.

The fused embedding is ``E(t) + concat(E(eps), E(polar), E(azimuth))`` where
each of the three pose sub-embeddings is one third of the time embedding's
width, so no learned projection is needed to line them up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError

MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class CameraPose:
    polar: float = 0.0
    azimuth: float = math.pi
    pose_noise: float = 0.0

    def __post_init__(self):
        if not -math.pi / 2 <= self.polar <= math.pi / 2:
            raise ConfigError(f"polar={self.polar} outside [-pi/2, pi/2]")
        if not 0.0 <= self.azimuth < 2 * math.pi:
            raise ConfigError(f"azimuth={self.azimuth} outside [0, 2pi)")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.polar, self.azimuth, self.pose_noise)


def _frequencies(half: int, dtype) -> torch.Tensor:
    return torch.exp(-math.log(MAX_PERIOD) * torch.arange(half, dtype=dtype) / half)


def sinusoidal_embed(value, dim: int, dtype=torch.float32) -> torch.Tensor:
    """[sin(v w_0) .. sin(v w_{h-1}), cos(v w_0) .. cos(v w_{h-1})] with log-spaced w.

    ``value`` may be a scalar or a 1-D tensor of values; output has a trailing
    axis of width ``dim``.
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    v = torch.as_tensor(value, dtype=dtype)
    args = v[..., None] * _frequencies(dim // 2, dtype)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def fuse_pose_time(t, polar, azimuth, pose_noise, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fused time/pose embedding; arguments broadcast over a leading batch axis."""
    if dim % 6:
        raise ConfigError(f"fused embedding width {dim} must be divisible by 6")
    sub = dim // 3
    pose_part = torch.cat(
        [
            sinusoidal_embed(pose_noise, sub, dtype),
            sinusoidal_embed(polar, sub, dtype),
            sinusoidal_embed(azimuth, sub, dtype),
        ],
        dim=-1,
    )
    return sinusoidal_embed(t, dim, dtype) + pose_part


def fuse_pose(t, pose: CameraPose, dim: int, dtype=torch.float32) -> torch.Tensor:
    return fuse_pose_time(t, pose.polar, pose.azimuth, pose.pose_noise, dim, dtype)


def poses_tensor(poses: list[CameraPose]) -> torch.Tensor:
    return torch.tensor([p.as_tuple() for p in poses], dtype=torch.float64)


def augment_pose(
    pose: CameraPose, sigma: float, rng: np.random.Generator, mode: str = "magnitude"
) -> CameraPose:
    """Training-time pose jitter.

    ``magnitude``: polar and azimuth get independent N(0, sigma) offsets and
    pose_noise is the L2 norm of the offset.  ``independent``: angles stay put and
    pose_noise is |N(0, sigma)|.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return CameraPose(pose.polar, pose.azimuth, 0.0)
    if mode == "independent":
        return CameraPose(pose.polar, pose.azimuth, float(abs(rng.normal(0.0, sigma))))
    if mode != "magnitude":
        raise ConfigError(f"unknown pose noise mode {mode!r}")
    dp, da = rng.normal(0.0, sigma, size=2)
    polar = float(np.clip(pose.polar + dp, -math.pi / 2, math.pi / 2))
    azimuth = float((pose.azimuth + da) % (2 * math.pi))
    return CameraPose(polar, azimuth, float(math.hypot(dp, da)))
