"""Physically based shading of Gaussian primitives under SH environment light.

Each primitive is shaded once per view: the hemisphere around its normal is
covered by a Fibonacci lattice, incident radiance comes from a degree-3 SH
expansion, and the reflectance is a metallic/roughness microfacet model
(Lambert diffuse + GGX distribution, Schlick Fresnel, separable Smith masking
with ``k = alpha / 2``).  Every sample carries solid-angle weight ``2 pi / M``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .core import (
    SH_COEFFS,
    ActivatedCloud,
    Camera,
    DiagnosticsError,
    GaussianCloud,
    RelightableGaussian,
    SceneAsset,
    SHLighting,
    activate,
)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
ALPHA_FLOOR = 1e-3  # smallest GGX alpha (= roughness**2) the quadrature is asked to resolve
GRAZING_EPS = 1e-6

_C0 = 0.5 / math.sqrt(math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2a = 0.5 * math.sqrt(15.0 / math.pi)
_C2b = 0.25 * math.sqrt(5.0 / math.pi)
_C2c = 0.25 * math.sqrt(15.0 / math.pi)
_C3a = 0.25 * math.sqrt(35.0 / (2.0 * math.pi))
_C3b = 0.5 * math.sqrt(105.0 / math.pi)
_C3c = 0.25 * math.sqrt(21.0 / (2.0 * math.pi))
_C3d = 0.25 * math.sqrt(7.0 / math.pi)
_C3e = 0.25 * math.sqrt(105.0 / math.pi)


def sh_basis_batch(dirs: np.ndarray) -> np.ndarray:
    """Real orthonormal SH for bands 0..3 at unit directions ``(..., 3)`` -> ``(..., 16)``.

    Order is ``(l, m)`` = (0,0), (1,-1), (1,0), (1,1), (2,-2) ... (3,3).
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y,
        _C1 * z,
        _C1 * x,
        _C2a * x * y,
        _C2a * y * z,
        _C2b * (3.0 * zz - 1.0),
        _C2a * x * z,
        _C2c * (xx - yy),
        _C3a * y * (3.0 * xx - yy),
        _C3b * x * y * z,
        _C3c * y * (5.0 * zz - 1.0),
        _C3d * z * (5.0 * zz - 3.0),
        _C3c * x * (5.0 * zz - 1.0),
        _C3e * z * (xx - yy),
        _C3a * x * (xx - 3.0 * yy),
    ], axis=-1)


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """Gradients of the polynomial form of each basis function, ``(..., 16, 3)``."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    o = np.zeros_like(x)
    c1 = np.full_like(x, _C1)
    rows = [
        (o, o, o),
        (o, c1, o),
        (o, o, c1),
        (c1, o, o),
        (_C2a * y, _C2a * x, o),
        (o, _C2a * z, _C2a * y),
        (o, o, 6.0 * _C2b * z),
        (_C2a * z, o, _C2a * x),
        (2.0 * _C2c * x, -2.0 * _C2c * y, o),
        (6.0 * _C3a * x * y, 3.0 * _C3a * (x * x - y * y), o),
        (_C3b * y * z, _C3b * x * z, _C3b * x * y),
        (o, _C3c * (5.0 * z * z - 1.0), 10.0 * _C3c * y * z),
        (o, o, _C3d * (15.0 * z * z - 3.0)),
        (_C3c * (5.0 * z * z - 1.0), o, 10.0 * _C3c * x * z),
        (2.0 * _C3e * x * z, -2.0 * _C3e * y * z, _C3e * (x * x - y * y)),
        (3.0 * _C3a * (x * x - y * y), -6.0 * _C3a * x * y, o),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_basis(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-4:
        raise DiagnosticsError("SH basis needs a unit direction")
    return sh_basis_batch(d)


def incident_radiance(L: SHLighting, direction) -> np.ndarray:
    """RGB radiance arriving from ``direction`` (clamped at zero)."""
    d = np.asarray(direction, dtype=np.float64)
    return np.maximum(sh_basis_batch(d) @ L.coefficients, 0.0)


@dataclass(frozen=True)
class HemisphereSamples:
    directions: np.ndarray
    normal: np.ndarray

    @property
    def sample_count(self) -> int:
        return self.directions.shape[0]


def hemisphere_lattice(M: int) -> np.ndarray:
    """Fibonacci lattice on the z-up hemisphere; sample 0 sits at the pole.

    Heights are uniform in ``(0, 1]`` so the points are equal-area.
    """
    if M < 1:
        raise ValueError("sample count must be at least 1")
    j = np.arange(M, dtype=np.float64)
    z = 1.0 - j / M
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = j * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def fibonacci_sphere(N: int) -> np.ndarray:
    """Equal-area spherical Fibonacci points covering the whole sphere."""
    j = np.arange(N, dtype=np.float64)
    z = 1.0 - (2.0 * j + 1.0) / N
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = j * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def align_z(normals: np.ndarray) -> np.ndarray:
    """Minimal rotations taking +z onto each unit normal, ``(K, 3)`` -> ``(K, 3, 3)``."""
    n = np.atleast_2d(normals)
    a, b, c = n[:, 0], n[:, 1], n[:, 2]
    flipped = c < -1.0 + 1e-9
    k = 1.0 / np.where(flipped, 1.0, 1.0 + c)
    R = np.empty((n.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - a * a * k
    R[:, 0, 1] = -a * b * k
    R[:, 0, 2] = a
    R[:, 1, 0] = -a * b * k
    R[:, 1, 1] = 1.0 - b * b * k
    R[:, 1, 2] = b
    R[:, 2, 0] = -a
    R[:, 2, 1] = -b
    R[:, 2, 2] = c
    R[flipped] = np.diag([1.0, -1.0, -1.0])
    return R


def align_z_backward(normals: np.ndarray, lattice: np.ndarray, g_dirs: np.ndarray) -> np.ndarray:
    """Chain gradients w.r.t. rotated lattice directions ``(K, M, 3)`` back to the normals."""
    a, b, c = (normals[:, i:i + 1] for i in range(3))
    flipped = c < -1.0 + 1e-9
    k = 1.0 / np.where(flipped, 1.0, 1.0 + c)
    ex, ey, ez = lattice[:, 0], lattice[:, 1], lattice[:, 2]
    gx, gy, gz = g_dirs[..., 0], g_dirs[..., 1], g_dirs[..., 2]
    k2 = k * k
    da = gx * (-2 * a * k * ex - b * k * ey + ez) + gy * (-b * k * ex) - gz * ex
    db = gx * (-a * k * ey) + gy * (-a * k * ex - 2 * b * k * ey + ez) - gz * ey
    dc = gx * (a * a * ex + a * b * ey) * k2 + gy * (a * b * ex + b * b * ey) * k2 + gz * ez
    out = np.stack([da.sum(1), db.sum(1), dc.sum(1)], axis=-1)
    return np.where(flipped, 0.0, out)


def fibonacci_hemisphere(n, M: int) -> HemisphereSamples:
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    dirs = hemisphere_lattice(M) @ align_z(n[None])[0].T
    return HemisphereSamples(dirs, n)


@dataclass(frozen=True)
class BRDFParams:
    normal: np.ndarray
    albedo: np.ndarray
    roughness: float
    metallic: float

    @classmethod
    def of(cls, g: RelightableGaussian) -> "BRDFParams":
        return cls(g.normal, np.asarray(g.albedo, float), float(g.roughness), float(g.metallic))


def _ggx_alpha(roughness):
    return np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, ALPHA_FLOOR)


def brdf_eval(p: BRDFParams, wi, wo, *, specular: bool = True) -> np.ndarray:
    """Evaluate the BRDF for one pair of directions (both above the surface)."""
    n = np.asarray(p.normal, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    b = np.asarray(p.albedo, dtype=np.float64)
    m = p.metallic
    out = (1.0 - m) * b / math.pi
    if not specular:
        return out
    a = float(_ggx_alpha(p.roughness))
    nl = max(float(n @ wi), GRAZING_EPS)
    nv = max(float(n @ wo), GRAZING_EPS)
    h = wi + wo
    h = h / max(np.linalg.norm(h), GRAZING_EPS)
    nh = float(n @ h)
    vh = min(max(float(wo @ h), 0.0), 1.0)
    q = nh * nh * (a * a - 1.0) + 1.0
    D = a * a / (math.pi * q * q)
    k = 0.5 * a
    V = 1.0 / (4.0 * (nl * (1 - k) + k) * (nv * (1 - k) + k))
    F0 = 0.04 * (1.0 - m) + b * m
    F = F0 + (1.0 - F0) * (1.0 - vh) ** 5
    return out + D * V * F


@dataclass
class ShadingContext:
    """Intermediates of a batched shading pass kept for the backward pass."""

    colors: np.ndarray  # (K, 3)
    normals: np.ndarray  # shading normals after the back-face flip (K, 3)
    sign: np.ndarray  # +1 / -1 flip per primitive
    dirs: np.ndarray  # (K, M, 3)
    wo: np.ndarray  # (K, 3)
    Y: np.ndarray  # (K, M, 16)
    Li: np.ndarray  # clamped radiance (K, M, 3)
    lit: np.ndarray  # radiance above the clamp (K, M, 3)
    weight: np.ndarray  # (2 pi / M) * cos (K, M)
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    specular: bool
    terms: Optional[dict]
    lattice: np.ndarray  # (M, 3) z-up sample pattern
    lighting: np.ndarray  # (16, 3)


def shade_batch(normals, albedo, roughness, metallic, L: SHLighting, wo, M: int, *, specular: bool = True) -> ShadingContext:
    """Shade ``K`` surface points at once; see :func:`shade_primitive`."""
    normals = np.asarray(normals, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    K = normals.shape[0]
    sign = np.where((normals * wo).sum(-1) > 0, 1.0, -1.0)
    n = normals * sign[:, None]
    lattice = hemisphere_lattice(M)
    dirs = np.einsum("kij,mj->kmi", align_z(n), lattice)
    Y = sh_basis_batch(dirs)
    raw = Y @ L.coefficients
    lit = raw > 0
    Li = np.where(lit, raw, 0.0)
    cos = np.einsum("kmi,ki->km", dirs, n)
    weight = (2.0 * math.pi / M) * cos
    E = Li * weight[..., None]

    b = np.asarray(albedo, dtype=np.float64).reshape(K, 3)
    r = np.asarray(roughness, dtype=np.float64).reshape(K)
    m = np.asarray(metallic, dtype=np.float64).reshape(K)
    colors = ((1.0 - m) / math.pi)[:, None] * b * E.sum(axis=1)
    terms = None
    if specular:
        a = _ggx_alpha(r)[:, None]
        k = 0.5 * a
        nl_raw = cos
        nl = np.maximum(nl_raw, GRAZING_EPS)
        nv_raw = (n * wo).sum(-1)[:, None]
        nv = np.maximum(nv_raw, GRAZING_EPS)
        hs = dirs + wo[:, None, :]
        hlen = np.maximum(np.linalg.norm(hs, axis=-1), GRAZING_EPS)
        h = hs / hlen[..., None]
        nh = np.einsum("kmi,ki->km", h, n)
        vh = np.clip(np.einsum("kmi,ki->km", h, wo), 0.0, 1.0)
        q = nh * nh * (a * a - 1.0) + 1.0
        D = a * a / (math.pi * q * q)
        gl = nl * (1 - k) + k
        gv = nv * (1 - k) + k
        V = 1.0 / (4.0 * gl * gv)
        F0 = 0.04 * (1.0 - m)[:, None] + b * m[:, None]  # (K, 3)
        Fw = (1.0 - vh) ** 5
        F = F0[:, None, :] + (1.0 - F0[:, None, :]) * Fw[..., None]
        spec = (D * V)[..., None] * F
        colors = colors + (spec * E).sum(axis=1)
        terms = dict(a=a, k=k, nl=nl, nl_ok=nl_raw > GRAZING_EPS, nv=nv, nv_ok=nv_raw > GRAZING_EPS,
                     h=h, hlen=hlen, nh=nh, vh=vh, q=q, D=D, gl=gl, gv=gv, V=V, F0=F0, Fw=Fw, F=F, spec=spec)
    return ShadingContext(colors, n, sign, dirs, wo, Y, Li, lit, weight, b, r, m, specular, terms,
                          lattice, L.coefficients)


@dataclass
class ShadingGrads:
    normals: np.ndarray  # w.r.t. the unflipped unit normal
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    lighting: np.ndarray  # (16, 3)
    wo: np.ndarray


def shade_backward(ctx: ShadingContext, grad: np.ndarray) -> ShadingGrads:
    """Analytic gradients of ``sum(grad * colors)``.

    The normal gradient includes the motion of the sample lattice, which
    rotates rigidly with the normal.
    """
    gc = np.asarray(grad, dtype=np.float64)
    b, r, m = ctx.albedo, ctx.roughness, ctx.metallic
    n, dirs, wo = ctx.normals, ctx.dirs, ctx.wo
    E = ctx.Li * ctx.weight[..., None]
    Esum = E.sum(axis=1)

    d_b = gc * ((1.0 - m) / math.pi)[:, None] * Esum
    d_m = -(gc * b / math.pi * Esum).sum(-1)
    d_r = np.zeros_like(r)
    d_n = np.zeros_like(n)
    d_wo = np.zeros_like(wo)
    g_dirs = np.zeros_like(dirs)

    f = ((1.0 - m) / math.pi)[:, None, None] * b[:, None, :]
    if ctx.specular:
        t = ctx.terms
        f = f + t["spec"]
        DV = t["D"] * t["V"]
        dF0 = gc * (DV[..., None] * (1.0 - t["Fw"])[..., None] * E).sum(axis=1)
        d_b += dF0 * m[:, None]
        d_m += (dF0 * (b - 0.04)).sum(-1)

        gDV = (gc[:, None, :] * t["F"] * E).sum(-1)  # (K, M)
        a, k, q, nh = t["a"], t["k"], t["q"], t["nh"]
        dD_da = 2 * a / (math.pi * q * q) - 4 * a**3 * nh * nh / (math.pi * q**3)
        dV_dgl = -t["V"] / t["gl"]
        dV_dgv = -t["V"] / t["gv"]
        dV_dk = dV_dgl * (1 - t["nl"]) + dV_dgv * (1 - t["nv"])
        dDV_da = dD_da * t["V"] + t["D"] * dV_dk * 0.5
        da_dr = np.where(r**2 > ALPHA_FLOOR, 2 * r, 0.0)
        d_r = (gDV * dDV_da).sum(axis=1) * da_dr

        dD_dnh = -4 * a * a * nh * (a * a - 1) / (math.pi * q**3)
        g_nh = gDV * t["V"] * dD_dnh
        g_nl = np.where(t["nl_ok"], gDV * t["D"] * dV_dgl * (1 - k), 0.0)
        g_nv = np.where(t["nv_ok"], gDV * t["D"] * dV_dgv * (1 - k), 0.0)
        h = t["h"]
        d_n += np.einsum("km,kmi->ki", g_nh, h) + np.einsum("km,kmi->ki", g_nl, dirs)
        d_n += g_nv.sum(axis=1)[:, None] * wo
        g_dirs += g_nl[..., None] * n[:, None, :]

        # outgoing direction: through nv, and through h (D via nh, F via vh)
        one_m_F0 = 1.0 - t["F0"]
        dFw_dvh = np.where((t["vh"] > 0) & (t["vh"] < 1), -5.0 * (1.0 - t["vh"]) ** 4, 0.0)
        g_vh = (gc[:, None, :] * DV[..., None] * one_m_F0[:, None, :] * E).sum(-1) * dFw_dvh
        g_h = g_nh[..., None] * n[:, None, :] + g_vh[..., None] * wo[:, None, :]
        d_wo += g_nv.sum(axis=1)[:, None] * n + np.einsum("km,kmi->ki", g_vh, h)
        g_h_perp = g_h - h * (g_h * h).sum(-1, keepdims=True)
        g_h_dir = g_h_perp / t["hlen"][..., None]
        d_wo += g_h_dir.sum(axis=1)
        g_dirs += g_h_dir

    # cosine term and incident radiance
    fL = (gc[:, None, :] * f * ctx.Li).sum(-1)  # (K, M)
    M = dirs.shape[1]
    d_n += (2.0 * math.pi / M) * np.einsum("km,kmi->ki", fL, dirs)
    g_dirs += (2.0 * math.pi / M) * fL[..., None] * n[:, None, :]
    gLi = np.where(ctx.lit, gc[:, None, :] * f * ctx.weight[..., None], 0.0)
    d_L = np.einsum("kms,kmc->sc", ctx.Y, gLi)
    g_Y = gLi @ ctx.lighting.T  # (K, M, 16)
    g_dirs += np.einsum("kms,kmsi->kmi", g_Y, sh_basis_grad(dirs))
    d_n += align_z_backward(n, ctx.lattice, g_dirs)

    return ShadingGrads(d_n * ctx.sign[:, None], d_b, d_r, d_m, d_L, d_wo)


def shade_primitive(g: RelightableGaussian, L: SHLighting, wo, M: int, *, specular: bool = True) -> np.ndarray:
    """Outgoing radiance of one primitive toward ``wo`` with full visibility.

    A primitive whose normal faces away from ``wo`` is shaded with the
    flipped normal.
    """
    wo = np.asarray(wo, dtype=np.float64)
    ctx = shade_batch(g.normal[None], g.albedo, g.roughness, g.metallic, L, wo[None], M, specular=specular)
    return ctx.colors[0]


def view_directions(positions: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    to_cam = cam.center - positions
    dist = np.linalg.norm(to_cam, axis=-1)
    return to_cam / dist[:, None], dist


def shade_cloud(act: ActivatedCloud, L: SHLighting, cam: Camera, M: int, *, specular: bool = True) -> ShadingContext:
    wo, _ = view_directions(act.positions, cam)
    return shade_batch(act.normals, act.albedo, act.roughness, act.metallic, L, wo, M, specular=specular)


def render_pbr(cloud: GaussianCloud, L: SHLighting, cam: Camera, M: int = 512, *, settings=None, specular: bool = True):
    """Rasterize per-primitive PBR colors; returns the raster result (``maps['pbr']``)."""
    from .splatting import RasterSettings, rasterize

    act = activate(cloud)
    ctx = shade_cloud(act, L, cam, M, specular=specular)
    return rasterize(act, {"pbr": ctx.colors}, cam, settings or RasterSettings())


def relight(asset: SceneAsset, L_new: SHLighting, cam: Camera, M: int = 512, *, settings=None) -> np.ndarray:
    """PBR image of ``asset`` under new lighting; the asset itself is untouched."""
    return render_pbr(asset.cloud, L_new, cam, M, settings=settings).maps["pbr"]


@dataclass(frozen=True)
class EnvironmentMap:
    """Equirectangular radiance: rows span polar angle 0..pi from +z, columns azimuth 0..2pi."""

    radiance: np.ndarray

    def __post_init__(self):
        rad = np.asarray(self.radiance, dtype=np.float64)
        if rad.ndim != 3 or rad.shape[2] != 3:
            raise ValueError(f"environment map must be (H, W, 3), got {rad.shape}")
        if not np.isfinite(rad).all():
            raise DiagnosticsError("environment map contains non-finite radiance")
        if (rad < 0).any():
            raise DiagnosticsError("environment map contains negative radiance")
        object.__setattr__(self, "radiance", rad)

    def lookup(self, dirs: np.ndarray) -> np.ndarray:
        """Bilinear radiance lookup, wrapping in azimuth."""
        H, W, _ = self.radiance.shape
        theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
        phi = np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), 2.0 * math.pi)
        row = np.clip(theta / math.pi * H - 0.5, 0.0, H - 1)
        col = phi / (2.0 * math.pi) * W - 0.5
        r0 = np.floor(row).astype(int)
        r1 = np.minimum(r0 + 1, H - 1)
        fr = (row - r0)[..., None]
        c0f = np.floor(col)
        fc = (col - c0f)[..., None]
        c0 = c0f.astype(int) % W
        c1 = (c0 + 1) % W
        img = self.radiance
        top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
        bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
        return top * (1 - fr) + bot * fr

    @classmethod
    def from_function(cls, fn, height: int, width: int) -> "EnvironmentMap":
        theta = (np.arange(height) + 0.5) / height * math.pi
        phi = (np.arange(width) + 0.5) / width * 2.0 * math.pi
        T, P = np.meshgrid(theta, phi, indexing="ij")
        dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
        return cls(fn(dirs))


def project_envmap_to_sh(env: EnvironmentMap, sample_count: int = 1_000_000, seed: int = 0) -> SHLighting:
    """Project an environment map onto degree-3 SH.

    The samples are a spherical Fibonacci lattice under a seeded random
    rotation, each weighted ``4 pi / N``.
    """
    if sample_count < 10_000:
        raise ValueError("environment projection needs at least 1e4 samples")
    R = Rotation.random(random_state=seed).as_matrix()
    coeffs = np.zeros((SH_COEFFS, 3))
    chunk = 200_000
    pts = fibonacci_sphere(sample_count)
    for start in range(0, sample_count, chunk):
        d = pts[start:start + chunk] @ R.T
        coeffs += sh_basis_batch(d).T @ env.lookup(d)
    return SHLighting(coeffs * (4.0 * math.pi / sample_count))


def _sphere_quadrature(n_theta: int = 12, n_phi: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre x uniform-azimuth rule, exact for SH products up to degree 2*n_theta-1."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * 2.0 * math.pi / n_phi
    Z, P = np.meshgrid(x, phi, indexing="ij")
    r = np.sqrt(1.0 - Z * Z)
    dirs = np.stack([r * np.cos(P), r * np.sin(P), Z], axis=-1).reshape(-1, 3)
    weights = np.repeat(w, n_phi) * (2.0 * math.pi / n_phi)
    return dirs, weights


def rotate_sh(L: SHLighting, R: np.ndarray) -> SHLighting:
    """Lighting whose radiance at ``d`` equals ``L`` at ``R^T d`` (resampled exactly)."""
    dirs, w = _sphere_quadrature()
    values = sh_basis_batch(dirs @ np.asarray(R, dtype=np.float64)) @ L.coefficients
    return SHLighting(sh_basis_batch(dirs).T @ (values * w[:, None]))
