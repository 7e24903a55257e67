"""Evaluation metrics.

Images are float arrays in [0, 1], shaped (H, W, 3) or (H, W); masks are
boolean (H, W).  SSIM uses an 8x8 uniform window with stride 1 and only
windows lying entirely inside the mask.
"""

from __future__ import annotations

import csv
import math
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _as_hwc(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ShapeError(f"expected an (H, W[, C]) image, got shape {a.shape}")
    return a


def _mask(mask, shape) -> np.ndarray:
    m = np.ones(shape[:2], bool) if mask is None else np.asarray(mask, bool)
    if m.shape != shape[:2]:
        raise ShapeError(f"mask {m.shape} does not match image {shape[:2]}")
    if not m.any():
        raise ShapeError("mask is empty")
    return m


def masked_psnr(a, b, mask=None, data_range: float = 1.0) -> float:
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = _mask(mask, a.shape)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def masked_ssim(a, b, mask=None, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over channels and over every window fully inside the mask."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = _mask(mask, a.shape)
    valid = sliding_window_view(m, (window, window)).all(axis=(-1, -2))
    if not valid.any():
        raise ShapeError(f"mask contains no full {window}x{window} window")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))[valid]
    wb = sliding_window_view(b, (window, window), axis=(0, 1))[valid]
    mu_a, mu_b = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-1, -2))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-1, -2))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-1, -2))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


class Embedder(Protocol):
    width: int

    def __call__(self, image) -> np.ndarray: ...


class ToyEmbedder:
    """Area-downsample to 8x8, flatten, L2-normalise.  Linear up to the normalisation."""

    def __init__(self, grid: int = 8, channels: int = 3):
        self.grid = grid
        self.width = grid * grid * channels

    def __call__(self, image) -> np.ndarray:
        a = _as_hwc(image)
        h, w, c = a.shape
        if h % self.grid or w % self.grid:
            raise ShapeError(f"image size {h}x{w} not divisible by {self.grid}")
        pooled = a.reshape(self.grid, h // self.grid, self.grid, w // self.grid, c).mean(axis=(1, 3))
        v = pooled.reshape(-1)
        n = np.linalg.norm(v)
        if n == 0:
            raise ShapeError("image embeds to the zero vector")
        return v / n


class ExternalEmbedder:
    """Adapter for any image -> vector callable (e.g. a CLIP or face-identity model)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], width: int):
        self.fn = fn
        self.width = width

    def __call__(self, image) -> np.ndarray:
        v = np.asarray(self.fn(image), dtype=np.float64).reshape(-1)
        if v.shape != (self.width,):
            raise ShapeError(f"embedder returned width {v.shape[0]}, declared {self.width}")
        return v


def embed_similarity(a, b, embedder: Embedder) -> float:
    ea, eb = embedder(a), embedder(b)
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0 or nb == 0:
        raise ShapeError("zero-norm embedding")
    return float(np.clip(ea @ eb / (na * nb), -1.0, 1.0))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_embeddings(xa: np.ndarray, xb: np.ndarray, shrinkage: bool | None = None) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)) of two (n, d) samples.

    ``shrinkage=None`` adds 1e-6 * trace / d to each covariance's diagonal only
    when a set has no more than d samples; ``False`` raises instead.
    """
    xa, xb = np.asarray(xa, np.float64), np.asarray(xb, np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1]:
        raise ShapeError(f"embedding sets must be (n, d) with equal d, got {xa.shape} and {xb.shape}")
    d = xa.shape[1]
    small = min(len(xa), len(xb)) < d + 1
    if shrinkage is False and small:
        raise ShapeError(f"need at least {d + 1} samples per set without shrinkage")
    if min(len(xa), len(xb)) < 2:
        raise ShapeError("need at least two samples per set")
    shrink = small if shrinkage is None else shrinkage
    mu_a, mu_b = xa.mean(0), xb.mean(0)
    sa, sb = np.cov(xa, rowvar=False).reshape(d, d), np.cov(xb, rowvar=False).reshape(d, d)
    if shrink:
        sa = sa + 1e-6 * np.trace(sa) / d * np.eye(d)
        sb = sb + 1e-6 * np.trace(sb) / d * np.eye(d)
    root_a = _psd_sqrt(sa)
    # eigenvalues of Sa^(1/2) Sb Sa^(1/2) are those of Sa Sb
    cross = np.linalg.eigvalsh(root_a @ sb @ root_a)
    tr_sqrt = float(np.sqrt(np.clip(cross, 0, None)).sum())
    diff = mu_a - mu_b
    return float(max(0.0, diff @ diff + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt))


def frechet_distance(set_a: Sequence, set_b: Sequence, embedder: Embedder, shrinkage: bool | None = None) -> float:
    ea = np.stack([embedder(x) for x in set_a])
    eb = np.stack([embedder(x) for x in set_b])
    return frechet_from_embeddings(ea, eb, shrinkage)


def _frames(frames) -> np.ndarray:
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 3:
        f = f[..., None]
    if f.ndim != 4:
        raise ShapeError(f"expected frames (F, H, W[, C]), got {f.shape}")
    if f.shape[0] < 2:
        raise ShapeError("need at least two frames")
    return f


def frame_difference(frames) -> np.ndarray:
    """Per-pixel mean |f[i+1] - f[i]| over adjacent pairs and channels, unnormalised."""
    f = _frames(frames)
    return np.abs(np.diff(f, axis=0)).mean(axis=(0, 3))


def frame_diff_heatmap(frames) -> tuple[np.ndarray, float]:
    """Frame difference scaled to [0, 1]; returns (heatmap, scale) with heatmap * scale the raw map."""
    raw = frame_difference(frames)
    scale = float(raw.max())
    if scale == 0.0:
        return np.zeros_like(raw), 0.0
    return raw / scale, scale


def temporal_smoothness_score(frames, hair_masks) -> float:
    """Mean raw frame difference over the union of the frames' hair masks (lower is smoother)."""
    f = _frames(frames)
    masks = np.asarray(hair_masks, bool)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.shape[-2:] != f.shape[1:3]:
        raise ShapeError(f"masks {masks.shape} not aligned with frames {f.shape}")
    union = masks.any(axis=0)
    if not union.any():
        raise ShapeError("hair masks are empty")
    return float(frame_difference(f)[union].mean())


def write_report(path, rows: list[tuple[str, float, str, str]], header: list[str] | None = None) -> None:
    """CSV with columns metric,value,set,config_hash; ``header`` lines go first as comments."""
    with open(path, "w", newline="") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["metric", "value", "set", "config_hash"])
        for metric, value, set_name, cfg_hash in rows:
            w.writerow([metric, repr(float(value)), set_name, cfg_hash])
