"""Domain types and the geometric building blocks shared by every other module.

Conventions used throughout the package:

* Quaternions are stored ``(w, x, y, z)``.
* Cameras are right-handed pinholes looking down ``+z`` in camera space with
  ``x`` to the right and ``y`` pointing down the image.  Pixel ``(u, v)`` has
  its center at image coordinates ``(u, v)``; the principal point lives in the
  same coordinates.
* A camera pose is world<-camera: ``x_world = R @ x_cam + center``.
* All color math is linear RGB.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit, logit

SH_COEFFS = 16


class RelightGSError(Exception):
    """Base class for all package errors."""


class DiagnosticsError(RelightGSError, ValueError):
    """Raised when a numeric input is invalid (non-finite, degenerate, ...)."""


class ShapeMismatchError(RelightGSError, ValueError):
    """Raised when array shapes that must agree do not."""


@dataclass(frozen=True)
class RelightableGaussian:
    """One primitive in raw (optimizable) parameterization."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_raw: float
    color: np.ndarray
    normal_raw: np.ndarray
    albedo: np.ndarray
    roughness: float
    metallic: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(expit(self.opacity_raw))

    @property
    def normal(self) -> np.ndarray:
        return self.normal_raw / np.linalg.norm(self.normal_raw)

    @property
    def covariance(self) -> np.ndarray:
        return covariance(self.scale, self.rotation)


_CLOUD_FIELDS = {
    "positions": 3,
    "log_scales": 3,
    "rotations": 4,
    "opacity_raw": 1,
    "colors": 3,
    "normal_raw": 3,
    "albedo": 3,
    "roughness": 1,
    "metallic": 1,
}


@dataclass(frozen=True)
class GaussianCloud:
    """Struct-of-arrays container for ``K`` relightable Gaussians.

    Vector attributes have shape ``(K, d)``; scalar attributes ``(K,)``.
    Primitive indices are the row indices and stay stable for the lifetime of
    the object.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_raw: np.ndarray
    colors: np.ndarray
    normal_raw: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    def __post_init__(self):
        k = None
        for name, width in _CLOUD_FIELDS.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if width == 1:
                arr = arr.reshape(-1)
            elif arr.ndim != 2 or arr.shape[1] != width:
                raise ShapeMismatchError(f"{name} must have shape (K, {width}), got {arr.shape}")
            if k is None:
                k = arr.shape[0]
            elif arr.shape[0] != k:
                raise ShapeMismatchError(f"{name} has {arr.shape[0]} rows, expected {k}")
            object.__setattr__(self, name, arr)
        if k == 0:
            raise ShapeMismatchError("a GaussianCloud needs at least one primitive")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> RelightableGaussian:
        return RelightableGaussian(
            position=self.positions[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_raw=float(self.opacity_raw[i]),
            color=self.colors[i],
            normal_raw=self.normal_raw[i],
            albedo=self.albedo[i],
            roughness=float(self.roughness[i]),
            metallic=float(self.metallic[i]),
        )

    def __iter__(self) -> Iterator[RelightableGaussian]:
        for i in range(len(self)):
            yield self[i]

    @property
    def count(self) -> int:
        return len(self)

    @classmethod
    def from_primitives(cls, prims: Sequence[RelightableGaussian]) -> "GaussianCloud":
        return cls(
            positions=np.array([p.position for p in prims]),
            log_scales=np.array([p.log_scale for p in prims]),
            rotations=np.array([p.rotation for p in prims]),
            opacity_raw=np.array([p.opacity_raw for p in prims]),
            colors=np.array([p.color for p in prims]),
            normal_raw=np.array([p.normal_raw for p in prims]),
            albedo=np.array([p.albedo for p in prims]),
            roughness=np.array([p.roughness for p in prims]),
            metallic=np.array([p.metallic for p in prims]),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _CLOUD_FIELDS}

    def replace(self, **changes) -> "GaussianCloud":
        return replace(self, **changes)

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(**{k: v[index] for k, v in self.as_dict().items()})

    def clamped(self) -> "GaussianCloud":
        """Project color and material attributes onto their unit ranges."""
        return self.replace(
            colors=np.clip(self.colors, 0.0, 1.0),
            albedo=np.clip(self.albedo, 0.0, 1.0),
            roughness=np.clip(self.roughness, 0.0, 1.0),
            metallic=np.clip(self.metallic, 0.0, 1.0),
        )


@dataclass(frozen=True)
class ActivatedCloud:
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray  # unit quaternions
    opacities: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    quat_norms: np.ndarray
    normal_norms: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


def activate(cloud: GaussianCloud) -> ActivatedCloud:
    """Map raw parameters to their constrained domains.

    Scale goes through ``exp``, opacity through a sigmoid, normals and
    quaternions are normalized.  Color and material values are already stored
    in their unit ranges and pass through unchanged.
    """
    for name, arr in cloud.as_dict().items():
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad.reshape(len(cloud), -1).any(axis=1))[0, 0])
            raise DiagnosticsError(f"non-finite {name} at primitive {idx}")
    qn = np.linalg.norm(cloud.rotations, axis=1)
    if (qn < 1e-8).any():
        raise DiagnosticsError(f"degenerate quaternion at primitive {int(np.argmax(qn < 1e-8))}")
    nn = np.linalg.norm(cloud.normal_raw, axis=1)
    if (nn < 1e-12).any():
        raise DiagnosticsError(f"zero-length normal at primitive {int(np.argmax(nn < 1e-12))}")
    return ActivatedCloud(
        positions=cloud.positions,
        scales=np.exp(cloud.log_scales),
        rotations=cloud.rotations / qn[:, None],
        opacities=expit(cloud.opacity_raw),
        colors=cloud.colors,
        normals=cloud.normal_raw / nn[:, None],
        albedo=cloud.albedo,
        roughness=cloud.roughness,
        metallic=cloud.metallic,
        quat_norms=qn,
        normal_norms=nn,
    )


def inverse_opacity(alpha):
    return logit(np.asarray(alpha, dtype=np.float64))


def inverse_scale(scale):
    return np.log(np.asarray(scale, dtype=np.float64))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(..., 4)`` -> ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return np.stack(rows, axis=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(R).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def covariance(scale, rotation) -> np.ndarray:
    """``R diag(s^2) R^T`` for a scale 3-vector and quaternion (batched over leading dims)."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    norm = np.linalg.norm(rotation, axis=-1, keepdims=True)
    if (norm < 1e-8).any():
        raise DiagnosticsError("degenerate quaternion (norm < 1e-8)")
    if (scale <= 0).any():
        raise DiagnosticsError("scale must be positive")
    R = quat_to_rotmat(rotation / norm)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def eval_gaussian(g: RelightableGaussian, x) -> float:
    """Unnormalized Gaussian density ``exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))``."""
    sigma = g.covariance
    if np.linalg.cond(sigma) > 1e12:
        raise DiagnosticsError("covariance is numerically singular")
    d = np.asarray(x, dtype=np.float64) - g.position
    return float(np.exp(-0.5 * d @ np.linalg.solve(sigma, d)))


@dataclass(frozen=True)
class SHLighting:
    """Real spherical-harmonic radiance, bands 0..3, one column per RGB channel."""

    coefficients: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS, 3)))

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        if c.size != SH_COEFFS * 3:
            raise ShapeMismatchError(f"SH lighting needs exactly 48 values, got {c.size}")
        object.__setattr__(self, "coefficients", c.reshape(SH_COEFFS, 3))

    def __mul__(self, k: float) -> "SHLighting":
        return SHLighting(self.coefficients * k)

    __rmul__ = __mul__

    @classmethod
    def constant(cls, radiance) -> "SHLighting":
        """Lighting whose radiance is ``radiance`` (scalar or RGB) in every direction."""
        c = np.zeros((SH_COEFFS, 3))
        c[0] = np.broadcast_to(np.asarray(radiance, dtype=np.float64), 3) * 2.0 * np.sqrt(np.pi)
        return cls(c)


@dataclass(frozen=True)
class Camera:
    focal: np.ndarray
    principal_point: np.ndarray
    resolution: tuple[int, int]  # (width, height)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        focal = np.broadcast_to(np.asarray(self.focal, dtype=np.float64), (2,)).copy()
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        w, h = (int(v) for v in self.resolution)
        if (focal <= 0).any():
            raise DiagnosticsError("focal length must be positive")
        if w <= 0 or h <= 0:
            raise DiagnosticsError("resolution must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise DiagnosticsError("camera rotation is not orthonormal")
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "resolution", (w, h))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def world_to_camera(self) -> np.ndarray:
        return self.rotation.T

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, focal, resolution, principal_point=None):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            # looking along `up`; any perpendicular works
            right = np.cross(fwd, [1.0, 0.0, 0.0] if abs(fwd[0]) < 0.9 else [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        w, h = resolution
        if principal_point is None:
            principal_point = ((w - 1) / 2.0, (h - 1) / 2.0)
        return cls(focal=focal, principal_point=principal_point, resolution=(w, h),
                   rotation=np.stack([right, down, fwd], axis=1), center=eye)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates ``(u, v)`` each of shape ``(H, W)``."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        return u, v

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, ``(H, W, 3)``."""
        u, v = self.pixel_grid()
        d = np.stack([(u - self.principal_point[0]) / self.focal[0],
                      (v - self.principal_point[1]) / self.focal[1],
                      np.ones_like(u)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation.T


def plucker_embedding(cam: Camera, image: np.ndarray) -> np.ndarray:
    """Per-pixel 9-channel feature ``(rgb, o x d, d)`` for a posed image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (cam.height, cam.width):
        raise ShapeMismatchError(
            f"image is {image.shape[:2]}, camera expects {(cam.height, cam.width)}")
    d = cam.ray_directions()
    moment = np.cross(np.broadcast_to(cam.center, d.shape), d)
    return np.concatenate([image[..., :3], moment, d], axis=-1)


@dataclass(frozen=True)
class SceneAsset:
    """A fitted Gaussian cloud together with the lighting it was observed under."""

    cloud: GaussianCloud
    lighting: SHLighting

    def with_lighting(self, lighting: SHLighting) -> "SceneAsset":
        return SceneAsset(self.cloud, lighting)
