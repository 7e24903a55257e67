"""Noise schedule, forward noising, the epsilon objective, DDIM and CFG.

All functions are pure.  Schedules are stored in float64 and cast to the
dtype of the tensors they are applied to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def coef(self, t: int) -> float:
        """alpha_bar at step t; t = -1 denotes the clean endpoint (alpha_bar = 1)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ShapeError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])

    def alpha_bar_tensor(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Gather alpha_bar for a batch of integer timesteps, broadcastable against ``like``."""
        ab = torch.tensor(self.alpha_bar, dtype=like.dtype)[t.long()]
        return ab.view(-1, *([1] * (like.dim() - 1)))


def build_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> NoiseSchedule:
    """Scaled-linear schedule: sqrt(beta) is linear in t."""
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}")
    if not 0.0 < beta_start < 1.0:
        raise ConfigError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not 0.0 < beta_end < 1.0:
        raise ConfigError(f"beta_end must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ConfigError(f"beta_start={beta_start} exceeds beta_end={beta_end}")
    if beta_start == beta_end:
        beta = np.full(int(T), float(beta_start))
    else:
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), int(T), dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(int(T), beta, alpha_bar, float(beta_start), float(beta_end))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.  ``t`` is an int or a per-sample tensor."""
    _same_shape(z0, eps, "add_noise")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.min() < 0 or t.max() >= schedule.T:
            raise ShapeError(f"timesteps outside [0, {schedule.T})")
        ab = schedule.alpha_bar_tensor(t, z0)
        return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
    if int(t) == -1:
        raise ShapeError("add_noise needs a timestep in [0, T)")
    ab = schedule.coef(int(t))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def noise_prediction_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    _same_shape(eps_pred, eps, "noise_prediction_loss")
    return torch.mean((eps_pred - eps) ** 2)


def predict_x0(z_t: torch.Tensor, eps_pred: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert add_noise given the noise; ``t`` is an int or a per-sample tensor."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.min() < 0 or t.max() >= schedule.T:
            raise ShapeError(f"timesteps outside [0, {schedule.T})")
        ab = schedule.alpha_bar_tensor(t, z_t)
        return (z_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()
    ab = schedule.coef(int(t))
    return (z_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddim_step(
    z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from t to t_prev; t_prev = -1 lands on the clean latent."""
    _same_shape(z_t, eps_pred, "ddim_step")
    if t_prev >= t:
        raise ShapeError(f"t_prev={t_prev} must be smaller than t={t}")
    ab_prev = schedule.coef(t_prev)
    x0 = predict_x0(z_t, eps_pred, t, schedule)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_pred


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending, uniformly strided timesteps from T-1 down to 0."""
    if not 1 <= steps <= T:
        raise ConfigError(f"sampler_steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return [T - 1]
    ts = np.round(np.linspace(T - 1, 0, steps)).astype(int)
    return [int(x) for x in ts]


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond), exact at scale 0 and 1."""
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    if scale < 0:
        raise ConfigError(f"cfg scale must be nonnegative, got {scale}")
    if scale == 1:
        return eps_cond.clone()
    if scale == 0:
        return eps_uncond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)
