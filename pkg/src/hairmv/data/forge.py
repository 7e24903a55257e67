"""Multi-view triplet generation and the on-disk dataset format.

Layout under the dataset root::

    manifest.txt
    <identity>/source/NNN.png      multi-view source frames
    <identity>/bald/NNN.png        same poses, hair coverage 0
    <identity>/ref/MM.png          references sharing the source's hair
    <identity>/masks/NNN_hair.png  source-frame masks (0/255)
    <identity>/masks/NNN_face.png
    <identity>/poses.txt           "index polar azimuth" per frame
    <identity>/spec.json           the AvatarSpec and the reference specs
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..config import FRONTAL_AZIMUTH, DataConfig
from ..errors import DataError
from ..pose import CameraPose
from .render import AvatarSpec, render_avatar, sample_identity, sample_spec

MANIFEST_VERSION = "hairmv-dataset 1"


@dataclass
class TripletSample:
    identity: str
    spec: AvatarSpec
    source: np.ndarray  # (K, H, W, 3) uint8
    bald: np.ndarray
    hair_masks: np.ndarray  # (K, H, W) bool
    face_masks: np.ndarray
    poses: list[CameraPose]
    references: np.ndarray  # (n, H, W, 3) uint8
    reference_specs: list[AvatarSpec] = field(default_factory=list)
    split: str = "train"


def view_poses(K: int, arc: float) -> list[CameraPose]:
    """K azimuths spaced uniformly over [frontal - arc, frontal + arc], polar 0."""
    if K < 1:
        raise DataError(f"need at least one view, got K={K}")
    if K == 1:
        return [CameraPose(0.0, FRONTAL_AZIMUTH)]
    offsets = np.linspace(-arc, arc, K)
    return [CameraPose(0.0, float(FRONTAL_AZIMUTH + o)) for o in offsets]


def make_multiview(spec: AvatarSpec, K: int, arc: float = math.radians(60), size: int = 32):
    """Source frames, bald frames, hair masks, face masks, poses."""
    poses = view_poses(K, arc)
    src, bald, hair, face = [], [], [], []
    bald_spec = spec.bald()
    for pose in poses:
        img, h, f = render_avatar(spec, pose, size)
        src.append(img)
        hair.append(h)
        face.append(f)
        bald.append(render_avatar(bald_spec, pose, size)[0])
    return np.stack(src), np.stack(bald), np.stack(hair), np.stack(face), poses


def make_references(
    spec: AvatarSpec,
    rng: np.random.Generator,
    n: int = 10,
    num_backgrounds: int = 100,
    scale_jitter: float = 0.15,
    arc: float = math.radians(60),
    size: int = 32,
):
    """n renders keeping ``spec``'s hair, with new face/skin/clothes, background, scale and pose."""
    if n < 1:
        raise DataError(f"need at least one reference, got n={n}")
    pool = [b for b in range(num_backgrounds) if b != spec.background_id]
    backgrounds = rng.choice(pool, size=n, replace=len(pool) < n)
    images, specs = [], []
    for bg in backgrounds:
        ref = replace(
            spec,
            **sample_identity(rng),
            background_id=int(bg),
            scale=float(1.0 + rng.uniform(-scale_jitter, scale_jitter)),
        )
        pose = CameraPose(0.0, float(FRONTAL_AZIMUTH + rng.uniform(-arc, arc)))
        images.append(render_avatar(ref, pose, size)[0])
        specs.append(ref)
    return np.stack(images), specs


def split_identities(n: int, rng: np.random.Generator) -> list[str]:
    n_hold = max(1, int(round(0.1 * n))) if n >= 3 else 0
    labels = ["train"] * n
    order = rng.permutation(n)
    for i in order[:n_hold]:
        labels[i] = "test"
    for i in order[n_hold : 2 * n_hold]:
        labels[i] = "val"
    return labels


def generate_dataset(cfg: DataConfig) -> list[TripletSample]:
    """Build every triplet in memory; fully determined by ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    splits = split_identities(cfg.identities, np.random.default_rng([cfg.seed, 1]))
    samples = []
    for i in range(cfg.identities):
        ident_rng = np.random.default_rng([cfg.seed, 2, i])
        spec = sample_spec(ident_rng, int(rng.integers(cfg.backgrounds)), seed=cfg.seed * 100_003 + i)
        src, bald, hair, face, poses = make_multiview(spec, cfg.views, cfg.azimuth_arc, cfg.image_size)
        refs, ref_specs = make_references(
            spec, ident_rng, cfg.references, cfg.backgrounds, cfg.scale_jitter, cfg.azimuth_arc, cfg.image_size
        )
        samples.append(
            TripletSample(f"id{i:04d}", spec, src, bald, hair, face, poses, refs, ref_specs, splits[i])
        )
    return samples


def png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def write_bytes(path: Path, data: bytes) -> str:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def format_poses(poses: list[CameraPose]) -> str:
    return "".join(f"{i} {p.polar!r} {p.azimuth!r}\n" for i, p in enumerate(poses))


def parse_poses(text: str, source: str = "poses") -> list[CameraPose]:
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        try:
            if len(parts) != 3 or int(parts[0]) != len(poses):
                raise ValueError("expected 'index polar azimuth' with consecutive indices")
            poses.append(CameraPose(float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: malformed pose line {line!r}: {exc}") from exc
    if not poses:
        raise DataError(f"{source}: no poses found")
    return poses


def build_dataset(cfg: DataConfig, out_dir: str | Path) -> dict:
    """Write the dataset and its manifest; returns the parsed manifest."""
    root = Path(out_dir)
    samples = generate_dataset(cfg)
    lines = [
        f"# {MANIFEST_VERSION}",
        f"# seed={cfg.seed} identities={cfg.identities} views={cfg.views} "
        f"references={cfg.references} image_size={cfg.image_size}",
    ]
    for s in samples:
        lines.append(f"identity {s.identity} {s.split}")
        files: list[tuple[str, bytes]] = []
        for k in range(len(s.poses)):
            files.append((f"source/{k:03d}.png", png_bytes(s.source[k])))
            files.append((f"bald/{k:03d}.png", png_bytes(s.bald[k])))
            files.append((f"masks/{k:03d}_hair.png", png_bytes(s.hair_masks[k].astype(np.uint8) * 255)))
            files.append((f"masks/{k:03d}_face.png", png_bytes(s.face_masks[k].astype(np.uint8) * 255)))
        for j in range(len(s.references)):
            files.append((f"ref/{j:02d}.png", png_bytes(s.references[j])))
        files.append(("poses.txt", format_poses(s.poses).encode()))
        meta = {"spec": s.spec.to_dict(), "references": [r.to_dict() for r in s.reference_specs]}
        files.append(("spec.json", json.dumps(meta, indent=1, sort_keys=True).encode()))
        for rel, data in files:
            digest = write_bytes(root / s.identity / rel, data)
            lines.append(f"file {s.identity}/{rel} {digest}")
    write_bytes(root / "manifest.txt", ("\n".join(lines) + "\n").encode())
    return read_manifest(root)


def read_manifest(root: str | Path) -> dict:
    root = Path(root)
    path = root / "manifest.txt"
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    identities: dict[str, str] = {}
    files: dict[str, str] = {}
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("# seed="):
            header = dict(kv.split("=") for kv in line[2:].split())
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "identity" and len(parts) == 3:
            identities[parts[1]] = parts[2]
        elif parts[0] == "file" and len(parts) == 3:
            files[parts[1]] = parts[2]
        else:
            raise DataError(f"{path}:{lineno}: unrecognised manifest line")
    return {"root": str(root), "header": header, "identities": identities, "files": files, "text": text}


def validate_dataset(root: str | Path) -> list[str]:
    """Problems found (missing or modified files); empty when the dataset is intact."""
    manifest = read_manifest(root)
    root = Path(root)
    problems = []
    for rel, digest in manifest["files"].items():
        path = root / rel
        if not path.is_file():
            problems.append(f"missing {rel}")
        elif hashlib.sha256(path.read_bytes()).hexdigest() != digest:
            problems.append(f"checksum mismatch {rel}")
    return problems


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).copy()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_dataset(root: str | Path, validate: bool = True) -> list[TripletSample]:
    root = Path(root)
    if validate:
        problems = validate_dataset(root)
        if problems:
            raise DataError(f"dataset {root} failed validation: " + "; ".join(problems[:10]))
    manifest = read_manifest(root)
    samples = []
    for ident, split in manifest["identities"].items():
        base = root / ident
        try:
            poses = parse_poses((base / "poses.txt").read_text(), str(base / "poses.txt"))
            meta = json.loads((base / "spec.json").read_text())
        except OSError as exc:
            raise DataError(f"cannot read identity {ident}: {exc}") from exc
        K = len(poses)
        bald_dir = base / "bald"
        if not bald_dir.is_dir():
            raise DataError(f"{ident}: missing bald frames directory {bald_dir}")
        src = np.stack([read_png(base / "source" / f"{k:03d}.png") for k in range(K)])
        bald = np.stack([read_png(bald_dir / f"{k:03d}.png") for k in range(K)])
        hair = np.stack([read_png(base / "masks" / f"{k:03d}_hair.png") > 127 for k in range(K)])
        face = np.stack([read_png(base / "masks" / f"{k:03d}_face.png") > 127 for k in range(K)])
        refs = sorted((base / "ref").glob("*.png"))
        references = np.stack([read_png(p) for p in refs])
        samples.append(
            TripletSample(
                ident,
                AvatarSpec.from_dict(meta["spec"]),
                src,
                bald,
                hair,
                face,
                poses,
                references,
                [AvatarSpec.from_dict(r) for r in meta["references"]],
                split,
            )
        )
    return samples
