"""Differentiable tile-based Gaussian rasterizer.

The forward pass projects activated Gaussians to screen space (EWA local
affine approximation), sorts them once per view by camera depth, bins them
into 16x16 pixel tiles and alpha-blends any number of per-primitive channels
front to back.  Work is laid out as ``(tiles, pixels_per_tile, bin_slots)``
arrays so every tile only touches the Gaussians in its own bin.

The backward pass recomputes the blend from the projected primitives and
walks each tile's bin back to front, so nothing per-pixel is stored between
the two passes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import (
    ActivatedCloud,
    Camera,
    GaussianCloud,
    RelightableGaussian,
    ShapeMismatchError,
    activate,
    quat_to_rotmat,
)


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    low_pass: float = 0.3
    near: float = 0.01
    # exact=True disables the alpha cutoff and early termination; used for
    # oracle comparisons and finite-difference checks
    exact: bool = False
    # contributions below this are outside a Gaussian's footprint in exact mode
    exact_footprint: float = 1e-12


@dataclass(frozen=True)
class ScreenGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    source_index: int


@dataclass
class Projection:
    """Screen-space quantities for every primitive of a cloud under one camera."""

    cam_points: np.ndarray  # (K, 3) camera-space means
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2) including the low-pass floor
    conic: np.ndarray  # (K, 2, 2) inverse of cov2d
    jacobian: np.ndarray  # (K, 2, 3)
    cov3d: np.ndarray  # (K, 3, 3)
    radius: np.ndarray  # (K, 2) half-extent of the footprint box in pixels
    visible: np.ndarray  # (K,) bool

    @property
    def view_depth(self) -> np.ndarray:
        return self.cam_points[:, 2]


@dataclass(frozen=True)
class TileBin:
    tile: tuple[int, int]
    indices: tuple[int, ...]


def _footprint_sigmas(opacity: np.ndarray, settings: RasterSettings) -> np.ndarray:
    floor = settings.exact_footprint if settings.exact else settings.alpha_min
    ratio = np.maximum(opacity / floor, 1.0)
    return np.maximum(3.0, np.sqrt(2.0 * np.log(ratio)))


def project_cloud(act: ActivatedCloud, cam: Camera, settings: RasterSettings = RasterSettings()) -> Projection:
    W = cam.world_to_camera
    t = (act.positions - cam.center) @ W.T
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    in_front = z > settings.near
    zs = np.where(in_front, z, 1.0)
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=-1)

    K = len(act)
    J = np.zeros((K, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs**2

    R = quat_to_rotmat(act.rotations)
    Ms = R * act.scales[:, None, :]
    cov3d = Ms @ np.swapaxes(Ms, 1, 2)
    M = J @ W
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2) + settings.low_pass * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], axis=-2) / det[:, None, None]

    k = _footprint_sigmas(act.opacities, settings)
    radius = k[:, None] * np.sqrt(np.stack([a, c], axis=-1))
    on_screen = (
        (mean2d[:, 0] + radius[:, 0] >= 0)
        & (mean2d[:, 0] - radius[:, 0] <= cam.width - 1)
        & (mean2d[:, 1] + radius[:, 1] >= 0)
        & (mean2d[:, 1] - radius[:, 1] <= cam.height - 1)
    )
    return Projection(t, mean2d, cov2d, conic, J, cov3d, radius, in_front & on_screen)


def project(g: RelightableGaussian, cam: Camera, settings: RasterSettings = RasterSettings()) -> Optional[ScreenGaussian]:
    """Project one primitive; ``None`` means it was culled."""
    proj = project_cloud(activate(GaussianCloud.from_primitives([g])), cam, settings)
    if not proj.visible[0]:
        return None
    return ScreenGaussian(proj.mean2d[0], proj.cov2d[0], float(proj.view_depth[0]), 0)


def depth_order(proj: Projection) -> np.ndarray:
    """Visible primitive indices sorted by view depth, ties broken by index."""
    idx = np.flatnonzero(proj.visible)
    return idx[np.lexsort((idx, proj.view_depth[idx]))]


@dataclass
class TileLayout:
    ntx: int
    nty: int
    tile_size: int
    slots: np.ndarray  # (Nt, L) primitive index, -1 for padding
    pix_u: np.ndarray  # (Nt, P)
    pix_v: np.ndarray  # (Nt, P)
    pix_valid: np.ndarray  # (Nt, P) bool
    pix_flat: np.ndarray  # (Nt, P) flat image index (clipped for padding)

    @property
    def slot_valid(self) -> np.ndarray:
        return self.slots >= 0

    def bins(self) -> list[TileBin]:
        out = []
        for t in range(self.slots.shape[0]):
            ids = self.slots[t]
            out.append(TileBin((t % self.ntx, t // self.ntx), tuple(int(i) for i in ids[ids >= 0])))
        return out


def build_tiles(proj: Projection, cam: Camera, settings: RasterSettings = RasterSettings()) -> TileLayout:
    T = settings.tile_size
    W, H = cam.width, cam.height
    ntx, nty = -(-W // T), -(-H // T)
    order = depth_order(proj)

    tx0 = np.arange(ntx) * T
    ty0 = np.arange(nty) * T
    m = proj.mean2d[order]
    r = proj.radius[order]
    hit_x = (m[None, :, 0] + r[None, :, 0] >= tx0[:, None]) & (m[None, :, 0] - r[None, :, 0] <= tx0[:, None] + T - 1)
    hit_y = (m[None, :, 1] + r[None, :, 1] >= ty0[:, None]) & (m[None, :, 1] - r[None, :, 1] <= ty0[:, None] + T - 1)
    overlap = (hit_y[:, None, :] & hit_x[None, :, :]).reshape(ntx * nty, len(order))

    L = max(int(overlap.sum(axis=1).max()) if len(order) else 0, 1)
    # stable argsort keeps depth order among the overlapping primitives
    pos = np.argsort(~overlap, axis=1, kind="stable")[:, :L]
    keep = np.take_along_axis(overlap, pos, axis=1) if len(order) else np.zeros((ntx * nty, 1), bool)
    slots = np.where(keep, order[pos] if len(order) else -1, -1)

    lu, lv = np.meshgrid(np.arange(T), np.arange(T))
    tu = (np.arange(ntx * nty) % ntx)[:, None] * T + lu.reshape(1, -1)
    tv = (np.arange(ntx * nty) // ntx)[:, None] * T + lv.reshape(1, -1)
    valid = (tu < W) & (tv < H)
    flat = np.where(valid, tv * W + tu, 0)
    return TileLayout(ntx, nty, T, slots, tu.astype(np.float64), tv.astype(np.float64), valid, flat)


@dataclass
class _Blend:
    alpha: np.ndarray  # effective alpha after cutoff/termination (Nt, P, L)
    gauss: np.ndarray  # raw Gaussian falloff (Nt, P, L)
    mask: np.ndarray  # where alpha counts (Nt, P, L)
    trans: np.ndarray  # transmittance before each slot
    dx: np.ndarray
    dy: np.ndarray


def _blend_weights(proj: Projection, opacity: np.ndarray, tiles: TileLayout, settings: RasterSettings) -> _Blend:
    slots = np.where(tiles.slot_valid, tiles.slots, 0)
    m = proj.mean2d[slots]  # (Nt, L, 2)
    Q = proj.conic[slots]  # (Nt, L, 2, 2)
    dx = tiles.pix_u[:, :, None] - m[:, None, :, 0]
    dy = tiles.pix_v[:, :, None] - m[:, None, :, 1]
    power = -0.5 * (Q[:, None, :, 0, 0] * dx * dx + 2.0 * Q[:, None, :, 0, 1] * dx * dy + Q[:, None, :, 1, 1] * dy * dy)
    gauss = np.exp(power)
    alpha = opacity[slots][:, None, :] * gauss
    mask = tiles.slot_valid[:, None, :] & tiles.pix_valid[:, :, None]
    if settings.exact:
        mask = mask & (alpha >= settings.exact_footprint)
    else:
        mask = mask & (alpha >= settings.alpha_min)
    alpha = np.where(mask, alpha, 0.0)
    trans = _exclusive_cumprod(1.0 - alpha)
    if not settings.exact:
        alive = trans >= settings.transmittance_min
        mask &= alive
        alpha = np.where(alive, alpha, 0.0)
    return _Blend(alpha, gauss, mask, trans, dx, dy)


def _exclusive_cumprod(x: np.ndarray) -> np.ndarray:
    out = np.ones_like(x)
    np.cumprod(x[..., :-1], axis=-1, out=out[..., 1:])
    return out


@dataclass
class RasterResult:
    """Blended maps plus everything the backward pass needs to recompute them."""

    maps: dict[str, np.ndarray]
    depth: np.ndarray
    accum_alpha: np.ndarray
    act: ActivatedCloud
    cam: Camera
    proj: Projection
    tiles: TileLayout
    channels: dict[str, np.ndarray]
    settings: RasterSettings

    def bins(self) -> list[TileBin]:
        return self.tiles.bins()


def _stack_channels(channels: Mapping[str, np.ndarray], K: int) -> tuple[dict[str, np.ndarray], list[tuple[str, int, int]]]:
    prepared, spans, offset = {}, [], 0
    for name, values in channels.items():
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != K:
            raise ShapeMismatchError(f"channel {name!r} has {v.shape[0]} entries, cloud has {K}")
        prepared[name] = v
        spans.append((name, offset, offset + v.shape[1]))
        offset += v.shape[1]
    return prepared, spans


def rasterize(
    cloud: GaussianCloud | ActivatedCloud,
    channels: Mapping[str, np.ndarray],
    cam: Camera,
    settings: RasterSettings = RasterSettings(),
) -> RasterResult:
    """Alpha-blend per-primitive channels into ``(H, W, d)`` maps.

    ``channels`` maps a name to a ``(K,)`` or ``(K, d)`` array.  Camera depth
    and accumulated opacity are always produced.
    """
    act = activate(cloud) if isinstance(cloud, GaussianCloud) else cloud
    K = len(act)
    prepared, spans = _stack_channels(channels, K)
    proj = project_cloud(act, cam, settings)
    tiles = build_tiles(proj, cam, settings)
    blend = _blend_weights(proj, act.opacities, tiles, settings)
    weights = blend.alpha * blend.trans

    slots = np.where(tiles.slot_valid, tiles.slots, 0)
    U = np.concatenate([*prepared.values(), proj.view_depth[:, None], np.ones((K, 1))], axis=1)
    out_t = np.matmul(weights, U[slots])

    H, W = cam.height, cam.width
    flat = np.zeros((H * W, U.shape[1]))
    sel = tiles.pix_valid
    flat[tiles.pix_flat[sel]] = out_t[sel]
    img = flat.reshape(H, W, -1)
    maps = {name: img[..., a:b] for name, a, b in spans}
    return RasterResult(maps, img[..., -2], img[..., -1], act, cam, proj, tiles, prepared, settings)


@dataclass
class GradientBuffer:
    """Per-primitive gradients of a scalar loss (all zero for culled primitives)."""

    channels: dict[str, np.ndarray]
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray  # w.r.t. the raw (unnormalized) quaternion
    opacity_raw: np.ndarray

    @classmethod
    def zeros(cls, K: int, channels: Mapping[str, int] = ()) -> "GradientBuffer":
        return cls({k: np.zeros((K, d)) for k, d in dict(channels).items()},
                   np.zeros((K, 3)), np.zeros((K, 3)), np.zeros((K, 4)), np.zeros(K))

    def __iadd__(self, other: "GradientBuffer") -> "GradientBuffer":
        for k, v in other.channels.items():
            if k in self.channels:
                self.channels[k] += v
            else:
                self.channels[k] = v.copy()
        self.positions += other.positions
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.opacity_raw += other.opacity_raw
        return self


def rasterize_backward(
    result: RasterResult,
    grad_maps: Mapping[str, np.ndarray],
    grad_depth: Optional[np.ndarray] = None,
    grad_alpha: Optional[np.ndarray] = None,
    *,
    cloud: Optional[GaussianCloud] = None,
    cam: Optional[Camera] = None,
) -> GradientBuffer:
    """Gradients of a scalar loss given its gradients w.r.t. the blended maps.

    ``cloud``/``cam`` may be passed to assert the backward pass runs against
    the same inputs as the forward pass.
    """
    if cam is not None and cam != result.cam and not _same_camera(cam, result.cam):
        raise ValueError("backward camera differs from the forward camera")
    if cloud is not None:
        act = activate(cloud)
        if len(act) != len(result.act) or not np.array_equal(act.positions, result.act.positions):
            raise ValueError("backward cloud differs from the forward cloud")
    unknown = set(grad_maps) - set(result.channels)
    if unknown:
        raise KeyError(f"no forward channel named {sorted(unknown)}")

    act, proj, tiles, settings = result.act, result.proj, result.tiles, result.settings
    K = len(act)
    H, W = result.cam.height, result.cam.width
    names = list(result.channels)
    dims = [result.channels[n].shape[1] for n in names]
    C = sum(dims) + 2

    G = np.zeros((H * W, C))
    off = 0
    for n, d in zip(names, dims):
        if n in grad_maps:
            g = np.asarray(grad_maps[n], dtype=np.float64).reshape(H * W, -1)
            G[:, off:off + d] = g
        off += d
    if grad_depth is not None:
        G[:, -2] = np.asarray(grad_depth).reshape(-1)
    if grad_alpha is not None:
        G[:, -1] = np.asarray(grad_alpha).reshape(-1)
    Gt = G[tiles.pix_flat] * tiles.pix_valid[..., None]  # (Nt, P, C)

    blend = _blend_weights(proj, act.opacities, tiles, settings)
    alpha, trans = blend.alpha, blend.trans
    slot_ok = tiles.slot_valid
    slots = np.where(slot_ok, tiles.slots, 0)
    U = np.concatenate([*result.channels.values(), proj.view_depth[:, None], np.ones((K, 1))], axis=1)
    Us = U[slots]

    weights = alpha * trans
    dU_slot = np.matmul(weights.transpose(0, 2, 1), Gt)
    c = np.matmul(Gt, Us.transpose(0, 2, 1))

    # back-to-front: r_l = sum_{k>l} c_k a_k prod_{l<j<k} (1 - a_j)
    L = alpha.shape[2]
    r = np.zeros_like(alpha)
    acc = np.zeros(alpha.shape[:2])
    for l in range(L - 2, -1, -1):
        acc = alpha[:, :, l + 1] * c[:, :, l + 1] + (1.0 - alpha[:, :, l + 1]) * acc
        r[:, :, l] = acc
    d_alpha = np.where(blend.mask, trans * (c - r), 0.0)

    d_opacity_slot = (d_alpha * blend.gauss).sum(axis=1)
    A = d_alpha * alpha  # d loss / d power
    S1 = (A * blend.dx).sum(axis=1)
    S2 = (A * blend.dy).sum(axis=1)
    Sxx = (A * blend.dx * blend.dx).sum(axis=1)
    Sxy = (A * blend.dx * blend.dy).sum(axis=1)
    Syy = (A * blend.dy * blend.dy).sum(axis=1)

    def scatter(v):
        v = np.where(slot_ok.reshape(slot_ok.shape + (1,) * (v.ndim - 2)), v, 0.0)
        flat_idx = slots.reshape(-1)
        out = np.zeros((K,) + v.shape[2:])
        np.add.at(out, flat_idx, v.reshape((-1,) + v.shape[2:]))
        return out

    dU = scatter(dU_slot)
    d_opacity = scatter(d_opacity_slot)
    S = scatter(np.stack([S1, S2, Sxx, Sxy, Syy], axis=-1))

    Q = proj.conic
    dmean = np.einsum("kij,kj->ki", Q, S[:, :2])
    dQ = -0.5 * np.stack([np.stack([S[:, 2], S[:, 3]], -1), np.stack([S[:, 3], S[:, 4]], -1)], axis=-2)
    dcov2 = -Q @ dQ @ Q

    Wc = result.cam.world_to_camera
    J = proj.jacobian
    M = J @ Wc
    dcov3 = np.swapaxes(M, 1, 2) @ dcov2 @ M
    dM = 2.0 * dcov2 @ M @ proj.cov3d
    dJ = dM @ Wc.T

    t = proj.cam_points
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = result.cam.focal
    dt = np.einsum("kij,ki->kj", J, dmean)
    dt[:, 0] += dJ[:, 0, 2] * (-fx / z**2)
    dt[:, 1] += dJ[:, 1, 2] * (-fy / z**2)
    dt[:, 2] += (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * (2 * fx * x / z**3)
                 + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * (2 * fy * y / z**3))
    dt[:, 2] += dU[:, -2]
    dpos = dt @ Wc

    dlog_scale, drot = _covariance_backward(act, dcov3)

    vis = proj.visible
    op = act.opacities
    out = GradientBuffer(
        channels={},
        positions=np.where(vis[:, None], dpos, 0.0),
        log_scales=np.where(vis[:, None], dlog_scale, 0.0),
        rotations=np.where(vis[:, None], drot, 0.0),
        opacity_raw=np.where(vis, d_opacity * op * (1.0 - op), 0.0),
    )
    off = 0
    for n, d in zip(names, dims):
        out.channels[n] = dU[:, off:off + d]
        off += d
    return out


def _same_camera(a: Camera, b: Camera) -> bool:
    return (np.array_equal(a.focal, b.focal) and np.array_equal(a.principal_point, b.principal_point)
            and a.resolution == b.resolution and np.array_equal(a.rotation, b.rotation)
            and np.array_equal(a.center, b.center))


def _covariance_backward(act: ActivatedCloud, dcov3: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain d loss / d Sigma into log-scale and raw-quaternion gradients."""
    s2 = act.scales**2
    R = quat_to_rotmat(act.rotations)
    G3 = 0.5 * (dcov3 + np.swapaxes(dcov3, 1, 2))
    # d/d(s_l^2) of sum_l s_l^2 r_l r_l^T is r_l^T G r_l
    dlog_scale = 2.0 * s2 * np.einsum("kil,kij,kjl->kl", R, G3, R)
    dR = 2.0 * G3 @ R * s2[:, None, :]

    w, x, y, z = act.rotations.T
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dq = np.stack([dw, dx, dy, dz], axis=-1)
    q = act.rotations
    dq_raw = (dq - q * (q * dq).sum(-1, keepdims=True)) / act.quat_norms[:, None]
    return dlog_scale, dq_raw


def pseudo_normal(depth: np.ndarray, accum_alpha: np.ndarray, cam: Camera) -> np.ndarray:
    """World-space normals from a blended depth map by forward differences.

    The blended depth is divided by the accumulated opacity before
    unprojection.  Pixels with opacity below 0.5, or whose +u/+v neighbor is
    missing or below 0.5, are set to zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    acc = np.asarray(accum_alpha, dtype=np.float64)
    H, W = depth.shape
    fg = acc >= 0.5
    z = np.where(fg, depth / np.where(fg, acc, 1.0), 0.0)
    u, v = cam.pixel_grid()
    P = np.stack([(u - cam.principal_point[0]) / cam.focal[0] * z,
                  (v - cam.principal_point[1]) / cam.focal[1] * z, z], axis=-1)
    out = np.zeros((H, W, 3))
    du = P[:-1, 1:] - P[:-1, :-1]
    dv = P[1:, :-1] - P[:-1, :-1]
    n = np.cross(du, dv)
    ok = fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1]
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(ok, norm, 1.0)[..., None]
    # face the camera: the normal must point against the viewing ray
    facing = (n * P[:-1, :-1]).sum(-1) > 0
    n = np.where(facing[..., None], -n, n)
    out[:-1, :-1] = np.where(ok[..., None], n @ cam.rotation.T, 0.0)
    return out
