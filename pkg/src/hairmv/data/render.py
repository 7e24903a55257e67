"""Deterministic procedural avatar renderer.

Coordinates are normalised to [-1, 1] with y pointing down.  The head is an
ellipse that rotates with azimuth: facial features slide towards the
turning side, the hair volume (which sits behind the face) slides the other
way, and the curl pattern rotates with the head.  Every region is an analytic
predicate, so the hair and face masks are exact.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..config import FRONTAL_AZIMUTH
from ..errors import ConfigError, ShapeError
from ..pose import CameraPose

MAX_ROTATION = math.pi / 2

Color = tuple[float, float, float]


@dataclass(frozen=True)
class AvatarSpec:
    skin_tone: Color
    face_color: Color
    head_rx: float
    head_ry: float
    eye_spacing: float
    shirt_color: Color
    hair_color: Color
    hair_length: float
    curliness: float
    coverage: float
    background_id: int
    scale: float = 1.0
    seed: int = 0

    def hair_params(self) -> tuple:
        return (self.hair_color, self.hair_length, self.curliness, self.coverage)

    def bald(self) -> "AvatarSpec":
        return replace(self, coverage=0.0)

    def with_hair_of(self, other: "AvatarSpec") -> "AvatarSpec":
        return replace(
            self,
            hair_color=other.hair_color,
            hair_length=other.hair_length,
            curliness=other.curliness,
            coverage=other.coverage,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AvatarSpec":
        d = dict(d)
        for key in ("skin_tone", "face_color", "shirt_color", "hair_color"):
            d[key] = tuple(d[key])
        return cls(**d)


def _rgb(rng: np.random.Generator, h, s, v) -> Color:
    return tuple(float(c) for c in colorsys.hsv_to_rgb(rng.uniform(*h) % 1.0, rng.uniform(*s), rng.uniform(*v)))


def sample_identity(rng: np.random.Generator) -> dict:
    """Face, skin, geometry and clothing parameters."""
    light, dark = np.array([0.96, 0.82, 0.70]), np.array([0.36, 0.23, 0.16])
    w = rng.uniform()
    skin = np.clip((1 - w) * light + w * dark + rng.normal(0, 0.02, 3), 0, 1)
    return dict(
        skin_tone=tuple(float(c) for c in skin),
        face_color=_rgb(rng, (0.0, 1.0), (0.2, 0.8), (0.05, 0.35)),
        head_rx=float(rng.uniform(0.36, 0.44)),
        head_ry=float(rng.uniform(0.44, 0.52)),
        eye_spacing=float(rng.uniform(0.32, 0.46)),
        shirt_color=_rgb(rng, (0.0, 1.0), (0.3, 0.9), (0.3, 0.9)),
    )


def sample_hair(rng: np.random.Generator) -> dict:
    return dict(
        hair_color=_rgb(rng, (0.0, 1.0), (0.35, 0.95), (0.15, 0.95)),
        hair_length=float(rng.uniform(0.1, 1.0)),
        curliness=float(rng.uniform(0.0, 1.0)),
        coverage=float(rng.uniform(0.45, 1.0)),
    )


def sample_spec(rng: np.random.Generator, background_id: int, seed: int = 0) -> AvatarSpec:
    return AvatarSpec(**sample_identity(rng), **sample_hair(rng), background_id=int(background_id), seed=int(seed))


def render_background(background_id: int, size: int) -> np.ndarray:
    """One of a fixed family of gradient/texture backgrounds, (size, size, 3) float."""
    rng = np.random.default_rng(10_000 + int(background_id))
    c0 = np.array(_rgb(rng, (0, 1), (0.1, 0.7), (0.3, 1.0)))
    c1 = np.array(_rgb(rng, (0, 1), (0.1, 0.7), (0.2, 0.9)))
    kind = int(background_id) % 5
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    if kind == 0:
        w = y
    elif kind == 1:
        w = x
    elif kind == 2:
        period = rng.uniform(0.15, 0.35)
        w = ((x + y) / period % 1.0 < 0.5).astype(np.float64)
    elif kind == 3:
        cell = int(rng.integers(3, 7))
        w = (((np.arange(size)[:, None] // cell) + (np.arange(size)[None, :] // cell)) % 2).astype(np.float64)
    else:
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        w = np.clip(np.hypot(x - cx, y - cy) / 0.8, 0, 1)
    return (1 - w)[..., None] * c0 + w[..., None] * c1


def composite_augment(source: np.ndarray, mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Pixel-exact select: source where mask is set, background elsewhere."""
    if source.shape != background.shape:
        raise ShapeError(f"source {source.shape} and background {background.shape} differ")
    if mask.shape != source.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {source.shape[:2]}")
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ShapeError("composite mask must be binary")
        mask = mask.astype(bool)
    return np.where(mask[..., None], source, background)


def check_pose(pose: CameraPose) -> float:
    rotation = (pose.azimuth - FRONTAL_AZIMUTH + math.pi) % (2 * math.pi) - math.pi
    if abs(rotation) > MAX_ROTATION + 1e-12:
        raise ConfigError(f"azimuth {pose.azimuth:.4f} is more than 90 degrees from frontal")
    return rotation


def _layers(spec: AvatarSpec, pose: CameraPose, size: int):
    theta = check_pose(pose)
    s = spec.scale
    grid = (np.arange(size, dtype=np.float64) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(grid, grid, indexing="ij")
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    cx = 0.10 * sin_t * s
    cy = (-0.08 + 0.30 * math.sin(pose.polar)) * s
    rx = spec.head_rx * s * (1 - 0.10 * abs(sin_t))
    ry = spec.head_ry * s
    du, dv = (u - cx) / rx, (v - cy) / ry
    head = du**2 + dv**2 <= 1.0

    neck = (np.abs(u - 0.5 * cx) <= 0.16 * s) & (v >= cy + 0.6 * ry)
    shirt = ((u - 0.3 * cx) / (0.80 * s)) ** 2 + ((v - (cy + ry + 0.62 * s)) / (0.45 * s)) ** 2 <= 1.0

    hair = np.zeros_like(head)
    if spec.coverage > 0:
        hcx = cx - 0.06 * sin_t * s
        hu, hv = (u - hcx) / rx, (v - cy) / ry
        phi = np.arctan2(hv, hu)
        bulge = 1.18 + 0.10 * spec.curliness * np.sin(8 * phi + 4 * theta)
        # round crown, straight-hanging sides below the head's centre line
        outer = (hu**2 + hv**2 <= bulge**2) | ((hv > 0) & (np.abs(hu) <= bulge))
        hairline = -1.0 + 0.75 * spec.coverage
        bottom = -0.2 + 1.8 * spec.hair_length
        face_visible = head & (dv > hairline)
        hair = outer & (hv <= bottom) & ~face_visible

    eyes = np.zeros_like(head)
    for side in (-1.0, 1.0):
        offset = side * spec.eye_spacing * cos_t + 0.75 * sin_t
        if abs(offset) < 0.9:
            ex, ey = cx + rx * offset, cy - 0.05 * ry
            eyes |= (u - ex) ** 2 + (v - ey) ** 2 <= (0.065 * s) ** 2
    mx, my = cx + 0.70 * rx * sin_t, cy + 0.50 * ry
    mouth = ((u - mx) / (0.20 * rx * max(cos_t, 0.3))) ** 2 + ((v - my) / (0.05 * s)) ** 2 <= 1.0
    features = (eyes | mouth) & head
    return head, neck, shirt, hair, features


def render_avatar(spec: AvatarSpec, pose: CameraPose, size: int = 32):
    """Render to (image uint8 HxWx3, hair mask, face mask)."""
    head, neck, shirt, hair, features = _layers(spec, pose, size)
    img = render_background(spec.background_id, size)
    fg = np.zeros((size, size, 3))
    fg[shirt] = spec.shirt_color
    skin = head | neck
    fg[skin] = spec.skin_tone
    fg[features] = spec.face_color
    fg[hair] = spec.hair_color
    face = skin & ~hair
    img = composite_augment(fg, shirt | skin | hair, img)
    image = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return image, hair, face


def to_float(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float32 3xHxW in [0, 1]."""
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float 3xHxW in [0, 1] -> uint8 HxWx3, clipping only here."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
