"""Image and geometry quality metrics.

Chamfer distance here is the non-squared Euclidean nearest-neighbour distance,
averaged in both directions and halved, so it reads as a length in world units.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .core import SceneAsset, activate

# Rec. 601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for a unit dynamic range; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.asarray(LUMA_WEIGHTS)
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    raise ValueError(f"expected an H×W or H×W×3 image, got shape {img.shape}")


def ssim(a, b) -> float:
    """Mean structural similarity of the luma channels.

    Local statistics use an 11×11 Gaussian window (σ = 1.5) with reflected
    borders; the mean is taken over pixels whose window fits inside the image.
    """
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")
    radius = SSIM_WINDOW // 2

    def blur(z):
        return gaussian_filter(z, SSIM_SIGMA, mode="reflect", truncate=radius / SSIM_SIGMA)

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())


def _points(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name}: expected an (N, 3) point array, got shape {p.shape}")
    if len(p) == 0:
        raise ValueError(f"{name}: empty point cloud")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name}: non-finite coordinates")
    return p


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbour in ``dst``."""
    src, dst = _points(src, "src"), _points(dst, "dst")
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer_distance(a, b) -> float:
    d_ab = nearest_distances(a, b)
    d_ba = nearest_distances(b, a)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def f_score(a, b, tau: float = 0.01) -> float:
    """Harmonic mean of precision (a near b) and recall (b near a) at distance ``tau``."""
    if not tau > 0:
        raise ValueError(f"threshold must be positive, got {tau}")
    precision = float(np.mean(nearest_distances(a, b) <= tau))
    recall = float(np.mean(nearest_distances(b, a) <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def extract_point_cloud(asset: SceneAsset, opacity_min: float = 0.5) -> np.ndarray:
    """Means of the primitives whose activated opacity reaches ``opacity_min``."""
    act = activate(asset.cloud)
    keep = act.opacities >= opacity_min
    if not keep.any():
        raise ValueError(f"no primitive has opacity >= {opacity_min}")
    return act.positions[keep].copy()
