"""Reconstruction -> pixel and sample level predictions.

Body mask from Otsu plus ball morphology, a dense 3D SSIM map between the
masked reconstruction and the input, Gaussian smoothing and a threshold.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .volcore import BinaryMask3D, Volume3D, resample_mask_nearest, write_mask

log = logging.getLogger(__name__)

REFERENCE_DIM = 256  # resolution at which gaussian_sigma is specified


@dataclass
class PostprocConfig:
    otsu_dilation_radius: int = 5
    closing_radius: int = 5
    ssim_border_pad: int = 3
    gaussian_sigma: float = 15.0
    ssim_threshold: float = 0.5
    ssim_window: int = 7
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0
    otsu_levels: int = 256

    def __post_init__(self):
        if self.otsu_dilation_radius < 1 or self.closing_radius < 1:
            raise ValueError("morphology radii must be >= 1")
        if not 0.0 < self.ssim_threshold < 1.0:
            raise ValueError("ssim_threshold must lie in (0, 1)")
        if self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")

    def sigma_for(self, working_dim) -> float:
        return self.gaussian_sigma * float(working_dim) / REFERENCE_DIM


@dataclass
class PredictionResult:
    pixel_mask: BinaryMask3D
    sample_score: int
    branch: str
    diagnostics: dict = field(default_factory=dict)

    def write(self, pixel_path=None, sample_path=None):
        if pixel_path is not None:
            write_mask(self.pixel_mask, pixel_path)
        if sample_path is not None:
            Path(sample_path).write_text(f"{self.sample_score}\n")


# ------------------------------------------------------------------ morphology


def ball(radius) -> np.ndarray:
    """Digital Euclidean ball ``|o|^2 <= r^2`` as a (2r+1)^3 boolean array."""
    r = int(radius)
    g = np.arange(-r, r + 1)
    d2 = g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2
    return d2 <= r * r


def dilate_ball(mask, radius):
    """Ball dilation via the exact Euclidean distance transform."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    d2 = ndimage.distance_transform_edt(~mask, return_distances=True) ** 2
    return d2 <= radius * radius + 1e-6


def erode_ball(mask, radius):
    """Ball erosion; voxels outside the array count as background."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    d2 = ndimage.distance_transform_edt(padded) ** 2
    return (d2 > radius * radius + 1e-6)[1:-1, 1:-1, 1:-1]


def close_ball(mask, radius):
    r = int(radius)
    padded = np.pad(np.asarray(mask, dtype=bool), r + 1)
    closed = erode_ball(dilate_ball(padded, r), r)
    sl = slice(r + 1, -(r + 1))
    return closed[sl, sl, sl]


def largest_component(mask):
    """Largest 26-connected component (lowest label wins ties)."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def fill_holes(mask):
    """Fill background pockets not reachable from the volume border."""
    return ndimage.binary_fill_holes(mask)


def otsu_threshold(data, levels=256) -> Optional[float]:
    """Intensity cut maximising between-class variance; None if constant."""
    a = np.asarray(data, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return None
    q = np.minimum(np.floor((a - lo) / (hi - lo) * levels), levels - 1).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=levels)
    k = kernels.otsu_cut(hist)
    return lo + (k + 1) * (hi - lo) / levels


def body_mask(v: Volume3D, cfg: PostprocConfig = PostprocConfig()) -> BinaryMask3D:
    """Otsu -> ball dilation -> largest component -> ball closing -> hole fill.

    A constant volume has no Otsu split and yields an empty mask.
    """
    thr = otsu_threshold(v.data, cfg.otsu_levels)
    if thr is None:
        log.warning("body mask: constant volume, returning empty mask")
        return BinaryMask3D.empty(v.shape, v.spacing)
    fg = v.data >= thr
    m = dilate_ball(fg, cfg.otsu_dilation_radius)
    m = largest_component(m)
    m = close_ball(m, cfg.closing_radius)
    m = fill_holes(m)
    return BinaryMask3D(m, v.spacing)


# ------------------------------------------------------------------ SSIM


def ssim_map(x: Volume3D, y: Volume3D, cfg: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Per-voxel SSIM over a cubic uniform window, same shape as the inputs."""
    if x.shape != y.shape:
        raise ValueError(f"ssim_map: shape mismatch {x.shape} vs {y.shape}")
    p = cfg.ssim_border_pad
    a = np.pad(x.data.astype(np.float64), p, mode="edge")
    b = np.pad(y.data.astype(np.float64), p, mode="edge")
    w = cfg.ssim_window

    def mean(z):
        return ndimage.uniform_filter(z, size=w, mode="nearest")

    mu_a, mu_b = mean(a), mean(b)
    mu_ab = mu_a * mu_b
    var_a = mean(a * a) - mu_a * mu_a
    var_b = mean(b * b) - mu_b * mu_b
    cov = mean(a * b) - mu_ab
    c1 = (cfg.ssim_k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.ssim_k2 * cfg.dynamic_range) ** 2
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    s = num / den
    if p:
        s = s[p:-p, p:-p, p:-p]
    return np.clip(s, -1.0, 1.0)


def score_pixels(ssim, body: BinaryMask3D, cfg: PostprocConfig = PostprocConfig(),
                 working_dim=None) -> BinaryMask3D:
    """Smooth the in-body SSIM and flag voxels below the threshold."""
    ssim = np.asarray(ssim, dtype=np.float64)
    if ssim.shape != body.shape:
        raise ValueError(f"score_pixels: shape mismatch {ssim.shape} vs {body.shape}")
    if working_dim is None:
        working_dim = max(ssim.shape)
    s = np.where(body.data, ssim, 1.0)
    smooth = ndimage.gaussian_filter(s, sigma=cfg.sigma_for(working_dim), mode="nearest", truncate=4.0)
    return BinaryMask3D((smooth < cfg.ssim_threshold) & body.data, body.spacing)


def smoothed_ssim(ssim, body: BinaryMask3D, cfg: PostprocConfig = PostprocConfig(), working_dim=None):
    ssim = np.asarray(ssim, dtype=np.float64)
    if working_dim is None:
        working_dim = max(ssim.shape)
    s = np.where(body.data, ssim, 1.0)
    return ndimage.gaussian_filter(s, sigma=cfg.sigma_for(working_dim), mode="nearest", truncate=4.0)


def finalize(pixel_mask: BinaryMask3D, original_dims, branch="diffusion", diagnostics=None) -> PredictionResult:
    """Bring the working-resolution mask back to the input grid and score it."""
    mask = pixel_mask
    if tuple(mask.dims) != tuple(original_dims):
        mask = resample_mask_nearest(mask, original_dims)
    score = int(mask.any())
    if not score and branch == "diffusion":
        branch = "none"
    diag = dict(diagnostics or {})
    diag["voxels_flagged"] = mask.count()
    return PredictionResult(mask, score, branch, diag)
