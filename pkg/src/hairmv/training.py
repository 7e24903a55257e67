"""The four training runs and their freeze contracts.

=====  ======================  ==============================================
stage  trainable namespaces    per-sample task
=====  ======================  ==============================================
bald   backbone, identity      source frame i  -> bald frame i, no reference
s1     backbone, identity      bald frame i    -> bald frame j at pose j
s2     hair                    bald frame i + reference -> source frame j
s3     temporal                k consecutive source frames, one reference
=====  ======================  ==============================================

The backbone trains together with the identity branch in ``bald`` and ``s1``
because at toy scale there is no pretrained backbone to keep frozen.  All
stages minimise the same epsilon-prediction MSE.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import LatentCodec
from .config import ModelConfig, StageConfig
from .data.forge import TripletSample
from .data.render import to_float
from .diffusion import NoiseSchedule, add_noise, noise_prediction_loss
from .errors import DataError, PrerequisiteError
from .models import NAMESPACES, HairTransferModel
from .pose import CameraPose, augment_pose

log = logging.getLogger(__name__)

TRAINABLE = {
    "bald": ("backbone", "identity"),
    "s1": ("backbone", "identity"),
    "s2": ("hair",),
    "s3": ("temporal",),
}
# stage a checkpoint must come from before this stage may start
PREREQUISITE = {"s2": ("s1", "s2", "s3"), "s3": ("s2", "s3")}


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


@dataclass(frozen=True)
class FreezeContract:
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]

    @classmethod
    def for_stage(cls, stage: str) -> "FreezeContract":
        trainable = TRAINABLE[stage]
        return cls(trainable, tuple(ns for ns in NAMESPACES if ns not in trainable))

    def apply(self, model: HairTransferModel) -> list[torch.nn.Parameter]:
        params = []
        for ns, named in model.namespace_parameters().items():
            for p in named.values():
                p.requires_grad_(ns in self.trainable)
                if ns in self.trainable:
                    params.append(p)
        return params


def namespace_checksums(model: HairTransferModel) -> dict[str, str]:
    out = {}
    for ns, named in model.namespace_parameters().items():
        h = hashlib.sha256()
        for name in sorted(named):
            h.update(name.encode())
            h.update(named[name].detach().cpu().contiguous().numpy().tobytes())
        out[ns] = h.hexdigest()
    return out


def grad_norms(model: HairTransferModel) -> dict[str, float]:
    out = {}
    for ns, named in model.namespace_parameters().items():
        sq = 0.0
        for p in named.values():
            if p.grad is not None:
                sq += float(p.grad.detach().double().pow(2).sum())
        out[ns] = sq**0.5
    return out


class LatentData:
    """Pre-encoded latents of a list of triplets."""

    def __init__(self, samples: list[TripletSample], codec: LatentCodec, pixel_cond: bool = False):
        if not samples:
            raise DataError("no training identities")
        if any(s.bald is None or len(s.bald) != len(s.source) for s in samples):
            raise DataError("every identity needs bald frames pose-aligned with its source frames")

        def enc(frames):
            x = torch.from_numpy(np.stack([to_float(f) for f in frames]))
            return codec.encode(x).float()

        self.source = torch.stack([enc(s.source) for s in samples])
        self.bald = torch.stack([enc(s.bald) for s in samples])
        # what the identity branch sees: latents, or pixels for the ablation
        if pixel_cond:
            self.cond_source = torch.stack([torch.from_numpy(np.stack([to_float(f) for f in s.source])) for s in samples])
            self.cond_bald = torch.stack([torch.from_numpy(np.stack([to_float(f) for f in s.bald])) for s in samples])
        else:
            self.cond_source, self.cond_bald = self.source, self.bald
        self.refs = torch.stack([enc(s.references) for s in samples])
        self.poses = torch.tensor([[p.as_tuple() for p in s.poses] for s in samples], dtype=torch.float64)
        self.n, self.K = self.source.shape[:2]
        self.R = self.refs.shape[1]


@dataclass
class Batch:
    target: torch.Tensor
    cond: torch.Tensor
    poses: torch.Tensor
    ref: torch.Tensor | None = None
    frames: int = 1
    info: dict = field(default_factory=dict)


class StageSampler:
    """Draws identity/frame/reference indices for each stage from one seeded generator."""

    def __init__(self, data: LatentData, cfg: StageConfig):
        self.data = data
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 17])

    def _pose(self, n: int, j: int) -> tuple:
        p = self.data.poses[n, j]
        pose = CameraPose(float(p[0]), float(p[1]))
        return augment_pose(pose, self.cfg.pose_sigma, self.rng, self.cfg.pose_noise_mode).as_tuple()

    def reference_index(self) -> int:
        return int(self.rng.integers(self.data.R))

    def window_start(self, k: int) -> int:
        if k > self.data.K:
            raise DataError(f"sequence length k={k} exceeds the {self.data.K} available views")
        return int(self.rng.integers(self.data.K - k + 1))

    def draw(self, stage: str, batch: int) -> Batch:
        d = self.data
        if stage == "s3":
            return self._window()
        n = self.rng.integers(d.n, size=batch)
        i = self.rng.integers(d.K, size=batch)
        if stage == "bald":
            return Batch(
                d.bald[n, i], d.cond_source[n, i], torch.tensor([self._pose(a, b) for a, b in zip(n, i)]), info={"i": i, "j": i}
            )
        j = self.rng.integers(d.K, size=batch)
        poses = torch.tensor([self._pose(a, b) for a, b in zip(n, j)])
        if stage == "s1":
            return Batch(d.bald[n, j], d.cond_bald[n, i], poses, info={"i": i, "j": j})
        r = np.array([self.reference_index() for _ in range(batch)])
        return Batch(d.source[n, j], d.cond_bald[n, i], poses, ref=d.refs[n, r], info={"i": i, "j": j, "r": r})

    def _window(self) -> Batch:
        d, k = self.data, self.cfg.sequence_length
        n = int(self.rng.integers(d.n))
        s = self.window_start(k)
        frames = np.arange(s, s + k)
        if self.cfg.s3_bald_mode == "single":
            bald_idx = np.full(k, int(self.rng.integers(d.K)))
        else:
            bald_idx = frames
        r = self.reference_index()
        poses = torch.tensor([self._pose(n, j) for j in frames])
        return Batch(
            d.source[n, frames], d.cond_bald[n, bald_idx], poses, ref=d.refs[n, r : r + 1], frames=k,
            info={"start": s, "r": r},
        )


@dataclass
class StageResult:
    stage: str
    losses: list[float]
    frozen_grad_norms: list[float]
    checksums_before: dict[str, str]
    checksums_after: dict[str, str]

    def leading_trailing(self, window: int = 100) -> tuple[float, float]:
        return float(np.mean(self.losses[:window])), float(np.mean(self.losses[-window:]))

    def frozen_unchanged(self) -> bool:
        frozen = FreezeContract.for_stage(self.stage).frozen
        return all(self.checksums_before[ns] == self.checksums_after[ns] for ns in frozen)


def stage_loss(
    model: HairTransferModel,
    batch: Batch,
    stage: str,
    schedule: NoiseSchedule,
    gen: torch.Generator,
    keep: torch.Tensor,
    t: torch.Tensor | None = None,
) -> torch.Tensor:
    """One objective evaluation.  ``keep[b]`` False drops sample b's condition (CFG dropout)."""
    trainable = TRAINABLE[stage]
    z0 = batch.target
    B = z0.shape[0]
    if t is None:
        if batch.frames > 1:
            t = torch.randint(schedule.T, (1,), generator=gen).expand(B)
        else:
            t = torch.randint(schedule.T, (B,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = add_noise(z0, eps, t, schedule)
    e_f = model.embed(t, batch.poses)
    with torch.set_grad_enabled("identity" in trainable):
        residuals = model.identity_residuals(batch.cond, z_t, e_f)
    bank = None
    if stage in ("bald", "s1"):
        k = keep.to(z0.dtype).view(-1, 1, 1, 1)
        residuals = {key: r * k for key, r in residuals.items()}
    else:
        with torch.set_grad_enabled("hair" in trainable):
            ref_bank = model.extract_reference_features(batch.ref)
            if batch.frames > 1:
                ref_bank = {key: v.expand(B, -1, -1) for key, v in ref_bank.items()}
            bank = model.hair.select(keep, ref_bank, model.hair.null_bank(B))
    eps_pred = model(z_t, e_f, bank=bank, residuals=residuals, temporal=stage == "s3", frames=batch.frames)
    return noise_prediction_loss(eps_pred, eps)


def train_stage(
    model: HairTransferModel,
    data: LatentData,
    cfg: StageConfig,
    schedule: NoiseSchedule,
    callback=None,
) -> StageResult:
    stage = cfg.stage
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    contract = FreezeContract.for_stage(stage)
    params = contract.apply(model)
    opt = torch.optim.Adam(params, lr=cfg.effective_lr)
    sampler = StageSampler(data, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    before = namespace_checksums(model)
    losses, frozen_norms = [], []
    model.train()
    for step in range(cfg.steps):
        batch = sampler.draw(stage, cfg.batch_size)
        n_keep = 1 if stage == "s3" else batch.target.shape[0]
        keep = torch.from_numpy(sampler.rng.random(n_keep) >= cfg.cond_dropout)
        if stage == "s3":
            keep = keep.expand(batch.target.shape[0])
        # all of the model, not just the optimiser's params: stale grads would defeat the freeze check
        model.zero_grad(set_to_none=True)
        loss = stage_loss(model, batch, stage, schedule, gen, keep)
        loss.backward()
        norms = grad_norms(model)
        frozen_norms.append(sum(norms[ns] for ns in contract.frozen))
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d loss %.4f", stage, step, losses[-1])
        if callback is not None:
            callback(step, losses[-1])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return StageResult(stage, losses, frozen_norms, before, namespace_checksums(model))


def prepare_model(stage: str, model_cfg: ModelConfig, seed: int, init: tuple[HairTransferModel, dict] | None):
    """Model to start a stage from, enforcing stage order."""
    if stage in PREREQUISITE:
        if init is None:
            need = PREREQUISITE[stage][0]
            raise PrerequisiteError(f"stage {stage} requires a stage-{need} checkpoint (--resume)")
        model, meta = init
        if meta.get("stage") not in PREREQUISITE[stage]:
            raise PrerequisiteError(
                f"stage {stage} needs a checkpoint from {'/'.join(PREREQUISITE[stage])}, got '{meta.get('stage')}'"
            )
        if stage == "s2" and meta.get("stage") == "s1":
            model.hair.init_extractor_from(model.backbone)
        return model
    if init is not None:
        model, meta = init
        if meta.get("stage") != stage:
            raise PrerequisiteError(f"cannot resume stage {stage} from a '{meta.get('stage')}' checkpoint")
        return model
    torch.manual_seed(seed)
    return HairTransferModel(model_cfg)


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


@torch.no_grad()
def stratified_pose_loss(model, data: LatentData, schedule: NoiseSchedule, seed: int = 0, per_stratum: int = 64):
    """s1 objective on i == j pairs vs i != j pairs, same noise and timesteps for both."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    n = rng.integers(data.n, size=per_stratum)
    i = rng.integers(data.K, size=per_stratum)
    j = (i + rng.integers(1, data.K, size=per_stratum)) % data.K
    t = torch.randint(schedule.T, (per_stratum,), generator=gen)
    keep = torch.ones(per_stratum, dtype=torch.bool)
    out = {}
    for name, jj in (("same", i), ("different", j)):
        poses = data.poses[n, jj].float()
        poses[:, 2] = 0
        batch = Batch(data.bald[n, jj], data.cond_bald[n, i], poses)
        g = torch.Generator().manual_seed(seed + 1)
        out[name] = float(stage_loss(model, batch, "s1", schedule, g, keep, t=t))
    return out
