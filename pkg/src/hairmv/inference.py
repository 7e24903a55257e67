"""Bald conversion, single-view and multi-view hair transfer.

Sampling is deterministic DDIM with classifier-free guidance.  All K frames
of a multi-view run start from independent noise drawn from one seeded
stream, so with temporal attention disabled the frames are computed one at a
time and match single-view runs given the same per-frame noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import LatentCodec
from .config import GuidanceConfig
from .data.forge import png_bytes, write_bytes, format_poses
from .data.render import to_float, to_uint8
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps
from .errors import ConfigError, PrerequisiteError, ShapeError
from .models import HairTransferModel
from .pose import CameraPose, poses_tensor


@dataclass
class FrameSequence:
    frames: np.ndarray  # (K, H, W, 3) uint8
    poses: list[CameraPose]

    def __len__(self) -> int:
        return len(self.frames)


def _require_stage(meta: dict | None, allowed: tuple[str, ...], what: str) -> None:
    if meta is None:
        raise PrerequisiteError(f"{what} needs a checkpoint")
    if meta.get("stage") not in allowed:
        raise PrerequisiteError(f"{what} needs a {'/'.join(allowed)} checkpoint, got '{meta.get('stage')}'")


def initial_noise(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    """Independent per-frame draws from one seeded stream; shape[0] is the frame count."""
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def ddim_sample(
    model: HairTransferModel,
    schedule: NoiseSchedule,
    noise: torch.Tensor,
    poses: torch.Tensor,
    guidance: GuidanceConfig,
    cond: torch.Tensor | None = None,
    bank=None,
    null_bank=None,
    temporal: bool = False,
) -> torch.Tensor:
    """Run the sampler from ``noise`` (B, C, h, w).

    The unconditional branch drops the hair bank when one is given (null bank
    instead); otherwise it drops the identity residuals.
    """
    if poses.shape != (noise.shape[0], 3):
        raise ShapeError(f"poses must be ({noise.shape[0]}, 3), got {tuple(poses.shape)}")
    frames = noise.shape[0] if temporal else 1
    scale = guidance.cfg_scale
    z = noise
    ts = ddim_timesteps(schedule.T, guidance.sampler_steps)
    for n, t in enumerate(ts):
        t_prev = ts[n + 1] if n + 1 < len(ts) else -1
        e_f = model.embed(torch.full((z.shape[0],), float(t)), poses)
        residuals = model.identity_residuals(cond, z, e_f) if cond is not None else None
        eps_c = eps_u = None
        if scale != 0:
            eps_c = model(z, e_f, bank=bank, residuals=residuals, temporal=temporal, frames=frames)
        if scale != 1:
            if bank is not None:
                eps_u = model(z, e_f, bank=null_bank, residuals=residuals, temporal=temporal, frames=frames)
            else:
                eps_u = model(z, e_f, temporal=temporal, frames=frames)
        if eps_c is None:
            eps = eps_u
        elif eps_u is None:
            eps = eps_c
        else:
            eps = cfg_combine(eps_u, eps_c, scale)
        z = ddim_step(z, eps, t, t_prev, schedule)
    return z


class HairTransferPipeline:
    """Holds the bald converter and the transfer model with their shared codec and schedule."""

    def __init__(
        self,
        transfer_model: HairTransferModel | None,
        codec: LatentCodec,
        schedule: NoiseSchedule,
        bald_model: HairTransferModel | None = None,
        transfer_meta: dict | None = None,
        bald_meta: dict | None = None,
        guidance: GuidanceConfig = GuidanceConfig(),
    ):
        self.model = transfer_model
        self.bald_model = bald_model
        self.codec = codec
        self.schedule = schedule
        self.meta = transfer_meta
        self.bald_meta = bald_meta
        self.guidance = guidance
        for m in (transfer_model, bald_model):
            if m is not None:
                m.eval()

    # -- helpers ---------------------------------------------------------
    def _latent(self, image: np.ndarray) -> torch.Tensor:
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[-1] != self.codec.channels:
            raise ShapeError(f"expected an (H, W, {self.codec.channels}) image, got {img.shape}")
        return self.codec.encode(torch.from_numpy(to_float(img))[None]).float()

    def _cond(self, image: np.ndarray, model: HairTransferModel) -> torch.Tensor:
        """Identity-branch input: the latent, or raw pixels for a pixel-space branch."""
        if model.cfg.cond_space == "pixel":
            self._latent(image)  # shape check
            return torch.from_numpy(to_float(np.asarray(image)))[None]
        return self._latent(image)

    def _image(self, latent: torch.Tensor) -> np.ndarray:
        return to_uint8(self.codec.decode(latent.double()).numpy())

    @staticmethod
    def _noise(count: int, model: HairTransferModel, seed: int) -> torch.Tensor:
        c = model.cfg
        return initial_noise((count, c.in_channels, c.latent_size, c.latent_size), seed)

    # -- operations ------------------------------------------------------
    def bald_convert(self, source: np.ndarray, pose: CameraPose, seed: int = 0, guidance=None) -> np.ndarray:
        """Source image -> bald proxy at the same pose; no reference."""
        if self.bald_model is None:
            raise PrerequisiteError("bald conversion needs a bald-converter checkpoint")
        _require_stage(self.bald_meta, ("bald",), "bald conversion")
        cond = self._cond(source, self.bald_model)
        z = ddim_sample(
            self.bald_model,
            self.schedule,
            self._noise(1, self.bald_model, seed),
            poses_tensor([pose]),
            guidance or self.guidance,
            cond=cond,
        )
        return self._image(z[0])

    def _prepare(self, source, reference, source_pose, bald, seed):
        if self.model is None:
            raise PrerequisiteError("hair transfer needs a stage-2 or stage-3 checkpoint")
        if bald is None:
            bald = self.bald_convert(source, source_pose, seed)
        cond = self._cond(bald, self.model)
        bank = self.model.extract_reference_features(self._latent(reference))
        return cond, bank

    def transfer_single_view(
        self,
        source: np.ndarray,
        reference: np.ndarray,
        pose: CameraPose,
        source_pose: CameraPose | None = None,
        seed: int = 0,
        guidance: GuidanceConfig | None = None,
        bald: np.ndarray | None = None,
        noise: torch.Tensor | None = None,
    ) -> np.ndarray:
        """Render ``source``'s person with ``reference``'s hair at ``pose``.

        ``bald`` overrides the converted proxy (e.g. the ground-truth bald render).
        """
        _require_stage(self.meta, ("s2", "s3"), "hair transfer")
        cond, bank = self._prepare(source, reference, source_pose or pose, bald, seed)
        return self._single(cond, bank, pose, seed, guidance, noise)

    def _single(self, cond, bank, pose, seed, guidance, noise=None) -> np.ndarray:
        if noise is None:
            noise = self._noise(1, self.model, seed)[0]
        z = ddim_sample(
            self.model,
            self.schedule,
            noise[None],
            poses_tensor([pose]),
            guidance or self.guidance,
            cond=cond,
            bank=bank,
            null_bank=self.model.hair.null_bank(1),
        )
        return self._image(z[0])

    def transfer_multi_view(
        self,
        source: np.ndarray,
        reference: np.ndarray,
        poses: list[CameraPose],
        source_pose: CameraPose | None = None,
        seed: int = 0,
        guidance: GuidanceConfig | None = None,
        temporal: bool = True,
        bald: np.ndarray | None = None,
    ) -> FrameSequence:
        """K views jointly (temporal on) or one at a time (temporal off)."""
        K = len(poses)
        if K < 1:
            raise ConfigError("need at least one pose")
        if temporal:
            _require_stage(self.meta, ("s3",), "multi-view transfer with temporal attention")
            if K > self.model.cfg.max_frames:
                raise ShapeError(f"{K} views exceed the maximum sequence length {self.model.cfg.max_frames}")
        else:
            _require_stage(self.meta, ("s2", "s3"), "multi-view transfer")
        cond, bank = self._prepare(source, reference, source_pose or poses[0], bald, seed)
        noise = self._noise(K, self.model, seed)
        if not temporal:
            frames = [self._single(cond, bank, p, seed, guidance, noise[k]) for k, p in enumerate(poses)]
            return FrameSequence(np.stack(frames), list(poses))
        z = ddim_sample(
            self.model,
            self.schedule,
            noise,
            poses_tensor(poses),
            guidance or self.guidance,
            cond=cond.expand(K, -1, -1, -1),
            bank={k: v.expand(K, -1, -1) for k, v in bank.items()},
            null_bank=self.model.hair.null_bank(K),
            temporal=True,
        )
        return FrameSequence(np.stack([self._image(z[k]) for k in range(K)]), list(poses))


def contact_sheet(frames: np.ndarray, columns: int | None = None) -> np.ndarray:
    """Frames tiled left to right, top to bottom, on a black canvas."""
    frames = np.asarray(frames)
    k, h, w, c = frames.shape
    cols = columns or k
    rows = -(-k // cols)
    sheet = np.zeros((rows * h, cols * w, c), dtype=frames.dtype)
    for i, f in enumerate(frames):
        r, q = divmod(i, cols)
        sheet[r * h : (r + 1) * h, q * w : (q + 1) * w] = f
    return sheet


def write_frames(seq: FrameSequence, out_dir: str | Path, sheet: bool = True) -> list[Path]:
    """NNN.png per frame, poses.txt in the dataset format, optional contact_sheet.png."""
    out = Path(out_dir)
    written = []
    for k, f in enumerate(seq.frames):
        path = out / f"{k:03d}.png"
        write_bytes(path, png_bytes(f))
        written.append(path)
    write_bytes(out / "poses.txt", format_poses(seq.poses).encode())
    written.append(out / "poses.txt")
    if sheet:
        write_bytes(out / "contact_sheet.png", png_bytes(contact_sheet(seq.frames, min(len(seq), 7))))
        written.append(out / "contact_sheet.png")
    return written


__all__ = [
    "FrameSequence",
    "HairTransferPipeline",
    "contact_sheet",
    "ddim_sample",
    "initial_noise",
    "write_frames",
]
