"""Command-line entry point: ``hairmv forge | train | infer | eval``.

Every path argument is resolved against ``--root``.  Each command prints a
run header (code version, config hash, seed) and writes it next to its
artifacts.  Errors exit with the category code of ``hairmv.errors``.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .codec import LatentCodec
from .config import RunConfig, load_config
from .data.forge import png_bytes, write_bytes, build_dataset, load_dataset, parse_poses, read_manifest, read_png, view_poses
from .diffusion import build_schedule
from .errors import ConfigError, DataError, HairMVError
from .inference import HairTransferPipeline, write_frames
from .metrics import (
    ToyEmbedder,
    embed_similarity,
    frame_diff_heatmap,
    frechet_distance,
    masked_psnr,
    masked_ssim,
    temporal_smoothness_score,
    write_report,
)
from .pose import CameraPose
from .training import FreezeContract, LatentData, prepare_model, train_stage, write_loss_csv


def _header(command: str, cfg: RunConfig, seed: int, **extra) -> list[str]:
    items = [f"hairmv {__version__}", f"command={command}", f"config_hash={cfg.hash()}", f"seed={seed}"]
    items += [f"{k}={v}" for k, v in extra.items()]
    return [" ".join(items)]


def _emit_header(lines: list[str], path: Path | None) -> None:
    for line in lines:
        print(f"# {line}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"# {line}\n" for line in lines))


def _codec(cfg: RunConfig) -> LatentCodec:
    return LatentCodec(cfg.model.codec_factor, cfg.codec_seed, cfg.model.image_channels)


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    return build_schedule(s.num_train_timesteps, s.beta_start, s.beta_end)


# -- forge -----------------------------------------------------------------
def cmd_forge(args, root: Path) -> int:
    cfg = load_config(_path(root, args.config))
    overrides = {k: v for k, v in (("identities", args.identities), ("views", args.views), ("seed", args.seed)) if v is not None}
    cfg = replace(cfg, data=replace(cfg.data, **overrides))
    out = _path(root, args.out)
    previous = None
    if (out / "manifest.txt").is_file():
        previous = (out / "manifest.txt").read_bytes()
    _emit_header(_header("forge", cfg, cfg.data.seed), out / "run_header.txt")
    manifest = build_dataset(cfg.data, out)
    splits = list(manifest["identities"].values())
    print(
        f"dataset {out}: {len(splits)} identities "
        f"(train {splits.count('train')}, val {splits.count('val')}, test {splits.count('test')}), "
        f"{cfg.data.views} views, {cfg.data.references} references, {len(manifest['files'])} files"
    )
    digest = hashlib.sha256(manifest["text"].encode()).hexdigest()
    print(f"manifest sha256 {digest}")
    if previous is not None:
        print("manifest identical" if previous == manifest["text"].encode() else "manifest changed")
    return 0


# -- train -----------------------------------------------------------------
def cmd_train(args, root: Path) -> int:
    cfg = load_config(_path(root, args.config))
    overrides = {
        k: v
        for k, v in (
            ("steps", args.steps),
            ("seed", args.seed),
            ("sequence_length", args.k),
            ("batch_size", args.batch_size),
            ("lr_scale", args.lr_scale),
        )
        if v is not None
    }
    stage_cfg = cfg.stage(args.stage, **overrides)
    cfg = replace(cfg, train={**cfg.train, args.stage: stage_cfg})
    out = _path(root, args.out)
    init = load_checkpoint(_path(root, args.resume)) if args.resume else None
    model = prepare_model(args.stage, cfg.model, stage_cfg.seed, init)
    if init is not None:
        cfg = replace(cfg, model=model.cfg)
    data_root = _path(root, args.data)
    samples = [s for s in load_dataset(data_root) if s.split == "train"]
    if not samples:
        raise DataError(f"{data_root}: no training identities")
    codec = _codec(cfg)
    schedule = _schedule(cfg)
    _emit_header(
        _header("train", cfg, stage_cfg.seed, stage=args.stage, steps=stage_cfg.steps, lr=stage_cfg.effective_lr),
        out.with_suffix(".header.txt"),
    )
    data = LatentData(samples, codec, pixel_cond=model.cfg.cond_space == "pixel")
    result = train_stage(model, data, stage_cfg, schedule)
    manifest_sha = hashlib.sha256(read_manifest(data_root)["text"].encode()).hexdigest()
    digest = save_checkpoint(
        out,
        model,
        args.stage,
        codec,
        schedule,
        extra={"config_hash": cfg.hash(), "seed": stage_cfg.seed, "steps": stage_cfg.steps, "dataset": manifest_sha},
    )
    write_loss_csv(out.with_suffix(".losses.csv"), result.losses)
    lead, trail = result.leading_trailing(min(100, len(result.losses)))
    contract = FreezeContract.for_stage(args.stage)
    print(f"loss leading {lead:.4f} trailing {trail:.4f} ratio {trail / lead:.3f}")
    print(f"trainable: {', '.join(contract.trainable)}")
    print(f"frozen: {', '.join(contract.frozen)}; max per-step grad norm {max(result.frozen_grad_norms, default=0.0):.3g}")
    for ns in contract.frozen:
        same = result.checksums_before[ns] == result.checksums_after[ns]
        print(f"  {ns} checksum {'unchanged' if same else 'CHANGED'}")
    print(f"checkpoint {out} sha256 {digest}")
    return 0 if result.frozen_unchanged() else 1


# -- infer -----------------------------------------------------------------
def _parse_pose_arg(text: str) -> CameraPose:
    try:
        polar, azimuth = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--source-pose expects 'polar,azimuth', got {text!r}") from exc
    return CameraPose(polar, azimuth)


def cmd_infer(args, root: Path) -> int:
    cfg = load_config(_path(root, args.config))
    guidance = cfg.guidance
    if args.steps is not None or args.cfg is not None:
        guidance = replace(
            guidance,
            sampler_steps=args.steps if args.steps is not None else guidance.sampler_steps,
            cfg_scale=args.cfg if args.cfg is not None else guidance.cfg_scale,
        )
    cfg = replace(cfg, guidance=guidance)
    if args.poses:
        pose_path = _path(root, args.poses)
        try:
            poses = parse_poses(pose_path.read_text(), str(pose_path))
        except OSError as exc:
            raise DataError(f"cannot read pose file {pose_path}: {exc}") from exc
    else:
        poses = view_poses(args.views if args.views is not None else cfg.data.views, cfg.data.azimuth_arc)
    model, meta = load_checkpoint(_path(root, args.checkpoint))
    bald_model = bald_meta = None
    if args.bald_checkpoint:
        bald_model, bald_meta = load_checkpoint(_path(root, args.bald_checkpoint))
    temporal = meta.get("stage") == "s3" and not args.no_temporal
    out = _path(root, args.out)
    _emit_header(
        _header(
            "infer",
            cfg,
            args.seed,
            steps=guidance.sampler_steps,
            cfg_scale=guidance.cfg_scale,
            views=len(poses),
            temporal="on" if temporal else "off",
        ),
        out / "run_header.txt",
    )
    pipe = HairTransferPipeline(model, _codec(cfg), _schedule(cfg), bald_model, meta, bald_meta, guidance)
    source = read_png(_path(root, args.source))
    reference = read_png(_path(root, args.reference))
    bald = read_png(_path(root, args.bald)) if args.bald else None
    source_pose = _parse_pose_arg(args.source_pose) if args.source_pose else CameraPose()
    seq = pipe.transfer_multi_view(
        source, reference, poses, source_pose=source_pose, seed=args.seed, temporal=temporal, bald=bald
    )
    files = write_frames(seq, out, sheet=not args.no_sheet)
    print(f"wrote {len(seq)} frames to {out}")
    for f in files:
        print(f"{f.name} {file_sha256(f)}")
    return 0


# -- eval ------------------------------------------------------------------
def _frame_set(directory: Path) -> dict[str, np.ndarray]:
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return {p.name: read_png(p) for p in sorted(directory.glob("[0-9][0-9][0-9].png"))}


def _aligned(a: dict, b: dict, name_a: str, name_b: str) -> list[str]:
    missing = sorted(set(a) ^ set(b))
    if missing:
        where = [f"{m} (only in {name_a if m in a else name_b})" for m in missing]
        raise DataError("misaligned file sets: " + ", ".join(where))
    if not a:
        raise DataError(f"no NNN.png frames in {name_a}")
    return sorted(a)


def _masks(masks_dir: Path | None, names: list[str], shape) -> np.ndarray:
    if masks_dir is None:
        return np.ones((len(names), *shape[:2]), bool)
    out = []
    for n in names:
        p = masks_dir / f"{Path(n).stem}_hair.png"
        if not p.is_file():
            raise DataError(f"missing hair mask {p}")
        out.append(read_png(p) > 127)
    return np.stack(out)


def _set_metrics(gen: dict, ref: dict, names: list[str], hair: np.ndarray, masked: bool) -> list[tuple[str, float]]:
    emb = ToyEmbedder()
    g = [gen[n].astype(np.float64) / 255 for n in names]
    r = [ref[n].astype(np.float64) / 255 for n in names]
    keep = [~h if masked else np.ones_like(h) for h in hair]
    rows = [
        ("psnr", float(np.mean([masked_psnr(a, b, m) for a, b, m in zip(g, r, keep)]))),
        ("ssim", float(np.mean([masked_ssim(a, b, m) for a, b, m in zip(g, r, keep)]))),
        ("frechet", frechet_distance(g, r, emb)),
        ("embed_similarity", float(np.mean([embed_similarity(a, b, emb) for a, b in zip(g, r)]))),
    ]
    if len(g) >= 2:
        rows.append(("smoothness", temporal_smoothness_score(np.stack(g), hair)))
    return rows


def cmd_eval(args, root: Path) -> int:
    cfg = load_config(_path(root, args.config))
    gen_dir, ref_dir = _path(root, args.generated), _path(root, args.reference)
    masks_dir = None
    if args.dataset:
        ds = _path(root, args.dataset)
        manifest = read_manifest(ds)
        if args.identity not in manifest["identities"]:
            raise DataError(f"identity {args.identity!r} not in {ds}/manifest.txt")
        masks_dir = ds / args.identity / "masks"
    gen, ref = _frame_set(gen_dir), _frame_set(ref_dir)
    names = _aligned(gen, ref, str(gen_dir), str(ref_dir))
    hair = _masks(masks_dir, names, gen[names[0]].shape)
    sets = [("generated", gen)]
    if args.ablation:
        abl_dir = _path(root, args.ablation)
        abl = _frame_set(abl_dir)
        _aligned(gen, abl, str(gen_dir), str(abl_dir))
        sets.append(("ablation", abl))
    out = _path(root, args.out)
    header = _header("eval", cfg, 0, generated=gen_dir.name, reference=ref_dir.name, frames=len(names))
    _emit_header(header, None)
    rows = []
    for set_name, frames in sets:
        for metric, value in _set_metrics(frames, ref, names, hair, masks_dir is not None):
            rows.append((metric, value, set_name, cfg.hash()))
            print(f"{set_name:10s} {metric:17s} {value:.6f}")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rows, header)
    if len(names) >= 2:
        for set_name, frames in sets:
            heat, norm = frame_diff_heatmap(np.stack([frames[n] for n in names]).astype(np.float64) / 255)
            path = out.with_name(f"{out.stem}_heatmap_{set_name}.png")
            write_bytes(path, png_bytes(np.rint(heat * 255).astype(np.uint8)))
            print(f"heatmap {path.name} scale {norm:.6f}")
    return 0


# -- plumbing --------------------------------------------------------------
def _path(root: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else root / q


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hairmv", description="Multi-view hair transfer at desk scale.")
    ap.add_argument("--root", default=".", help="base directory for every relative path (default: cwd)")
    ap.add_argument("--version", action="version", version=f"hairmv {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="generate the synthetic multi-view dataset")
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.add_argument("--identities", type=int)
    f.add_argument("--views", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_forge)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("stage", choices=["bald", "s1", "s2", "s3"])
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset root written by forge")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--resume", help="checkpoint to start from (required for s2 and s3)")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--k", type=int, help="stage-3 sequence length")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-scale", type=float)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="transfer reference hair onto a source")
    i.add_argument("--config")
    i.add_argument("--checkpoint", required=True, help="stage-2 or stage-3 checkpoint")
    i.add_argument("--bald-checkpoint", help="bald converter (needed unless --bald is given)")
    i.add_argument("--source", required=True)
    i.add_argument("--reference", required=True)
    i.add_argument("--bald", help="use this bald image instead of converting the source")
    i.add_argument("--source-pose", help="'polar,azimuth' of the source image (default frontal)")
    views = i.add_mutually_exclusive_group()
    views.add_argument("--poses", help="pose file in the dataset's poses.txt format")
    views.add_argument("--views", type=int, help="K evenly spaced views over the configured arc")
    i.add_argument("--steps", type=int)
    i.add_argument("--cfg", type=float)
    i.add_argument("--no-temporal", action="store_true")
    i.add_argument("--no-sheet", action="store_true")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score generated frames against reference frames")
    e.add_argument("--config")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--dataset", help="dataset root; with --identity supplies hair masks")
    e.add_argument("--identity")
    e.add_argument("--ablation", help="second generated dir scored against the same reference")
    e.add_argument("--out", required=True, help="report CSV path")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and bool(args.dataset) != bool(args.identity):
        print("error: --dataset and --identity go together", file=sys.stderr)
        return ConfigError.exit_code
    root = Path(args.root)
    try:
        return args.func(args, root)
    except HairMVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
