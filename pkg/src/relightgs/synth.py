"""Procedural ground-truth scenes for self-consistency experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianCloud, SceneAsset, SHLighting, activate, inverse_opacity
from .optim import SupervisionSet, View, make_rng
from .render import RenderOutput, render
from .shading import shade_batch
from .splatting import RasterSettings, pseudo_normal, rasterize, rasterize_backward


def quantize(asset: SceneAsset) -> SceneAsset:
    """Round every parameter to float32 so an asset renders identically after a save/load."""
    c = {k: v.astype(np.float32).astype(np.float64) for k, v in asset.cloud.as_dict().items()}
    sh = asset.lighting.coefficients.astype(np.float32).astype(np.float64)
    return SceneAsset(GaussianCloud(**c), SHLighting(sh))


def random_lighting(rng: np.random.Generator, strength: float = 1.0, detail: float = 0.35) -> SHLighting:
    """Smooth, mostly positive SH lighting with a random tint and dominant direction."""
    tint = rng.uniform(0.6, 1.0, size=3)
    tint /= tint.max()
    coeffs = np.zeros((16, 3))
    coeffs[0] = 2.0 * math.sqrt(math.pi) * strength * tint
    sun = rng.normal(size=3)
    sun /= np.linalg.norm(sun)
    # band 1 of a directional lobe along `sun` (basis order y, z, x)
    coeffs[1:4] = (detail * strength * 2.0 * math.sqrt(math.pi / 3.0)) * np.outer([sun[1], sun[2], sun[0]], tint)
    coeffs[4:] = rng.normal(scale=0.08 * detail * strength, size=(12, 3))
    return SHLighting(coeffs)


def make_blob(rng: np.random.Generator, K: int = 16, extent=(0.6, 0.3, 0.25)) -> GaussianCloud:
    """Car-like elongated blob: primitives on a jittered ellipsoid shell, normals pointing out."""
    ext = np.asarray(extent, dtype=np.float64)
    d = rng.normal(size=(K, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    shell = d * ext * rng.uniform(0.55, 0.85, size=(K, 1))
    normals = shell / ext**2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    q = rng.normal(size=(K, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        positions=shell,
        log_scales=np.log(rng.uniform(0.08, 0.2, size=(K, 3))),
        rotations=q,
        opacity_raw=inverse_opacity(rng.uniform(0.75, 0.95, size=K)),
        colors=np.zeros((K, 3)),
        normal_raw=normals,
        albedo=rng.uniform(0.15, 0.85, size=(K, 3)),
        roughness=rng.uniform(0.35, 0.9, size=K),
        metallic=rng.uniform(0.0, 0.6, size=K),
    )


def make_random(rng: np.random.Generator, K: int = 16, extent: float = 0.5) -> GaussianCloud:
    """Unstructured primitives uniformly inside a cube, with random normals."""
    n = rng.normal(size=(K, 3))
    return GaussianCloud(
        positions=rng.uniform(-extent, extent, size=(K, 3)),
        log_scales=np.log(rng.uniform(0.05, 0.2, size=(K, 3))),
        rotations=rng.normal(size=(K, 4)),
        opacity_raw=inverse_opacity(rng.uniform(0.3, 0.95, size=K)),
        colors=np.zeros((K, 3)),
        normal_raw=n / np.linalg.norm(n, axis=1, keepdims=True),
        albedo=rng.uniform(0.1, 0.9, size=(K, 3)),
        roughness=rng.uniform(0.3, 1.0, size=K),
        metallic=rng.uniform(0.0, 0.8, size=K),
    )


def geometric_normals(cloud: GaussianCloud, cameras) -> GaussianCloud:
    """Replace each stored normal by the blend-weighted mean of depth-derived normals.

    The result agrees with the geometry the primitives actually render, which
    is what a fit supervised by pseudo-normals can recover.  Primitives no
    probe camera sees keep their normal.
    """
    act = activate(cloud)
    acc = np.zeros((len(cloud), 3))
    for cam in cameras:
        res = rasterize(act, {"normal": act.normals}, cam)
        pn = pseudo_normal(res.depth, res.accum_alpha, cam)
        # d/dU_k of sum_p <pn_p, N_p> is sum_p w_kp pn_p
        acc += rasterize_backward(res, {"normal": pn}).channels["normal"]
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    seen = norm[:, 0] > 1e-9
    normals = np.where(seen[:, None], acc / np.where(seen[:, None], norm, 1.0), act.normals)
    return cloud.replace(normal_raw=normals)


def bake_colors(cloud: GaussianCloud, lighting: SHLighting, samples: int) -> GaussianCloud:
    """Illumination-dependent flat colors: each primitive shaded as seen along its normal."""
    n = cloud.normal_raw / np.linalg.norm(cloud.normal_raw, axis=1, keepdims=True)
    ctx = shade_batch(n, cloud.albedo, cloud.roughness, cloud.metallic, lighting, n, samples)
    return cloud.replace(colors=np.clip(ctx.colors, 0.0, 1.0))


def orbit_cameras(count: int, *, distance: float = 3.0, resolution=(64, 64), focal: float = 110.0,
                  phase: float = 0.0, elevation=(-15.0, 55.0), target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras on a sphere around ``target`` (z up), azimuths on a golden-angle spiral."""
    cams = []
    lo, hi = np.radians(elevation)
    for i in range(count):
        az = 2.0 * math.pi * phase + i * math.pi * (3.0 - math.sqrt(5.0))
        el = lo + (hi - lo) * (i + 0.5) / count
        eye = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye + np.asarray(target), target, up=(0.0, 0.0, 1.0),
                                   focal=focal, resolution=resolution))
    return cams


@dataclass
class SyntheticScene:
    asset: SceneAsset
    cameras: list[Camera]
    renders: list[RenderOutput]
    samples: int

    def supervision(self, with_materials: bool = True) -> SupervisionSet:
        views = []
        for cam, r in zip(self.cameras, self.renders):
            mat = dict(albedo=r.albedo_map, roughness=r.roughness_map, metallic=r.metallic_map) if with_materials else {}
            views.append(View(cam, r.pbr_color, r.accum_alpha > 0.5, **mat))
        return SupervisionSet(views)


def render_views(asset: SceneAsset, cameras, samples: int, settings: RasterSettings = RasterSettings()):
    return [render(asset.cloud, asset.lighting, cam, samples, settings) for cam in cameras]


def make_scene(seed: int = 7, n_primitives: int = 16, n_views: int = 16, *, kind: str = "blob",
               resolution=(64, 64), samples: int = 64, lighting: SHLighting | None = None,
               camera_phase: float = 0.0) -> SyntheticScene:
    if n_views < 1:
        raise ValueError("need at least one view")
    rng = make_rng(seed)
    if kind == "blob":
        cloud = make_blob(rng, n_primitives)
    elif kind == "random":
        cloud = make_random(rng, n_primitives)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    if lighting is None:
        lighting = random_lighting(rng)
    cloud = geometric_normals(cloud, orbit_cameras(32, resolution=resolution, phase=0.5, elevation=(-60.0, 80.0)))
    cloud = bake_colors(cloud, lighting, samples)
    asset = quantize(SceneAsset(cloud, lighting))
    cams = orbit_cameras(n_views, resolution=resolution, phase=camera_phase)
    return SyntheticScene(asset, cams, render_views(asset, cams, samples), samples)
