"""Full attribute render of a relightable cloud and its parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import Camera, GaussianCloud, SHLighting, activate
from .shading import ShadingContext, shade_backward, shade_cloud
from .splatting import RasterResult, RasterSettings, rasterize, rasterize_backward

MAP_NAMES = ("color", "pbr_color", "normal", "albedo_map", "roughness_map", "metallic_map", "depth", "accum_alpha")
PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_raw", "colors", "normal_raw",
               "albedo", "roughness", "metallic", "sh")

_CHANNEL_OF = {
    "color": "color",
    "pbr_color": "pbr",
    "normal": "normal",
    "albedo_map": "albedo",
    "roughness_map": "roughness",
    "metallic_map": "metallic",
}


@dataclass
class RenderOutput:
    color: np.ndarray
    pbr_color: np.ndarray
    normal: np.ndarray
    albedo_map: np.ndarray
    roughness_map: np.ndarray
    metallic_map: np.ndarray
    depth: np.ndarray
    accum_alpha: np.ndarray
    raster: Optional[RasterResult] = field(default=None, repr=False)
    shading: Optional[ShadingContext] = field(default=None, repr=False)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in MAP_NAMES}


def render(
    cloud: GaussianCloud,
    lighting: SHLighting,
    cam: Camera,
    samples: int = 512,
    settings: RasterSettings = RasterSettings(),
    *,
    specular: bool = True,
) -> RenderOutput:
    act = activate(cloud)
    shading = shade_cloud(act, lighting, cam, samples, specular=specular)
    channels = {
        "color": act.colors,
        "pbr": shading.colors,
        "normal": act.normals,
        "albedo": act.albedo,
        "roughness": act.roughness,
        "metallic": act.metallic,
    }
    res = rasterize(act, channels, cam, settings)
    m = res.maps
    return RenderOutput(
        color=m["color"],
        pbr_color=m["pbr"],
        normal=m["normal"],
        albedo_map=m["albedo"],
        roughness_map=m["roughness"][..., 0],
        metallic_map=m["metallic"][..., 0],
        depth=res.depth,
        accum_alpha=res.accum_alpha,
        raster=res,
        shading=shading,
    )


def render_backward(out: RenderOutput, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients w.r.t. every raw cloud parameter and the SH coefficients.

    ``grads`` maps :data:`MAP_NAMES` entries to d loss / d map.
    """
    res, shading = out.raster, out.shading
    act = res.act
    grad_maps = {}
    for name, ch in _CHANNEL_OF.items():
        if name in grads:
            g = np.asarray(grads[name], dtype=np.float64)
            grad_maps[ch] = g[..., None] if g.ndim == 2 else g
    gb = rasterize_backward(res, grad_maps, grads.get("depth"), grads.get("accum_alpha"))
    K = len(act)

    def ch(name, width):
        v = gb.channels.get(name)
        return np.zeros((K, width)) if v is None else v

    d_normals = ch("normal", 3)
    d_albedo = ch("albedo", 3).copy()
    d_rough = ch("roughness", 1)[:, 0].copy()
    d_metal = ch("metallic", 1)[:, 0].copy()
    d_pos = gb.positions.copy()
    d_sh = np.zeros((16, 3))

    if "pbr" in gb.channels:
        sg = shade_backward(shading, gb.channels["pbr"])
        d_normals = d_normals + sg.normals
        d_albedo += sg.albedo
        d_rough += sg.roughness
        d_metal += sg.metallic
        d_sh += sg.lighting
        # the view direction points from the primitive toward the camera
        wo = shading.wo
        dist = np.linalg.norm(res.cam.center - act.positions, axis=-1)
        g = sg.wo
        d_pos -= (g - wo * (g * wo).sum(-1, keepdims=True)) / dist[:, None]

    n = act.normals
    d_normal_raw = (d_normals - n * (n * d_normals).sum(-1, keepdims=True)) / act.normal_norms[:, None]
    return {
        "positions": d_pos,
        "log_scales": gb.log_scales,
        "rotations": gb.rotations,
        "opacity_raw": gb.opacity_raw,
        "colors": ch("color", 3),
        "normal_raw": d_normal_raw,
        "albedo": d_albedo,
        "roughness": d_rough,
        "metallic": d_metal,
        "sh": d_sh,
    }
