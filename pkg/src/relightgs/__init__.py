"""Relightable 3D Gaussian splatting on the CPU.

Differentiable tile rasterization, physically based shading under SH lighting,
per-scene inverse rendering, relighting, and evaluation metrics.
"""
from .core import (
    Camera,
    DiagnosticsError,
    GaussianCloud,
    RelightableGaussian,
    RelightGSError,
    SceneAsset,
    ShapeMismatchError,
    SHLighting,
    activate,
    covariance,
)
from .estimator import RelightableGaussianRegressor
from .metrics import chamfer_distance, extract_point_cloud, f_score, psnr, ssim
from .optim import FitConfig, LossWeights, SupervisionSet, View, fit_scene
from .render import render
from .shading import EnvironmentMap, project_envmap_to_sh, relight, shade_primitive
from .splatting import RasterSettings, rasterize

__version__ = "0.1.0"

__all__ = [
    "Camera", "DiagnosticsError", "EnvironmentMap", "FitConfig", "GaussianCloud", "LossWeights",
    "RasterSettings", "RelightGSError", "RelightableGaussian", "RelightableGaussianRegressor",
    "SHLighting", "SceneAsset", "ShapeMismatchError", "SupervisionSet", "View", "activate",
    "chamfer_distance", "covariance", "extract_point_cloud", "f_score", "fit_scene",
    "project_envmap_to_sh", "psnr", "rasterize", "relight", "render", "shade_primitive", "ssim",
]
