"""Losses, gradient assembly and per-scene fitting."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .core import (
    Camera,
    GaussianCloud,
    RelightGSError,
    SceneAsset,
    ShapeMismatchError,
    SHLighting,
    inverse_opacity,
)
from .render import PARAM_NAMES, RenderOutput, render, render_backward
from .splatting import RasterSettings, pseudo_normal

log = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(seed))


# --------------------------------------------------------------------------- losses


def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def _masked_mse(pred, target, mask=None):
    """Mean over masked pixels of the per-pixel channel-mean squared error, and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    diff = pred - target
    if diff.ndim == 2:
        diff = diff[..., None]
    c = diff.shape[-1]
    if mask is None:
        mask = np.ones(diff.shape[:2], bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    m = mask[..., None]
    value = float((diff * diff * m).sum() / (n * c))
    grad = (2.0 / (n * c)) * diff * m
    return value, grad.reshape(pred.shape)


def loss_image(C, C_hat, mask=None) -> float:
    """MSE between a render and its target (color or PBR image alike)."""
    return _masked_mse(C, C_hat, mask)[0]


loss_pbr = loss_image


def consistency_target(depth, accum_alpha, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-normal target scaled by opacity, and the pixels it supervises."""
    pn = pseudo_normal(depth, accum_alpha, cam)
    A = np.asarray(accum_alpha)
    return pn * A[..., None], _consistency_mask(pn, A)


def _consistency_mask(N_pseudo, A):
    # pixels without a pseudo-normal (silhouette, image border) carry no target
    return (A > 0.5) & (np.abs(N_pseudo).sum(-1) > 0)


def _consistency(N, target, mask):
    diff = np.asarray(N, dtype=np.float64) - target
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(diff)
    m = mask[..., None]
    return float((diff * diff * m).sum() / n), (2.0 / n) * diff * m


def loss_consistency(N, N_pseudo, accum_alpha) -> float:
    """Mean squared distance between the blended normal map and ``N_pseudo * accum_alpha``.

    Only pixels with accumulated opacity above 0.5 and a defined (nonzero)
    pseudo-normal count; the squared distance is summed over the three
    components.
    """
    A = np.asarray(accum_alpha, dtype=np.float64)
    Np = np.asarray(N_pseudo, dtype=np.float64)
    _check_same(np.asarray(N), Np)
    return _consistency(N, Np * A[..., None], _consistency_mask(Np, A))[0]


def _material(B, R, M, B_hat, R_hat, M_hat, mask):
    grads = {}
    total = 0.0
    for key, pred, gt in (("albedo_map", B, B_hat), ("roughness_map", R, R_hat), ("metallic_map", M, M_hat)):
        if gt is None:
            continue
        v, g = _masked_mse(pred, gt, mask)
        total += v
        grads[key] = g
    return total, grads


def loss_material(B, R, M, B_hat=None, R_hat=None, M_hat=None, mask=None) -> tuple[float, bool]:
    """Sum of masked MSEs of the albedo, roughness and metallic maps.

    Returns ``(value, ablated)``; ``ablated`` is True (and the value 0) when
    no ground-truth map is given.
    """
    if B_hat is None and R_hat is None and M_hat is None:
        return 0.0, True
    return _material(B, R, M, B_hat, R_hat, M_hat, mask)[0], False


EDGE_SHARPNESS = 10.0


def _edge_weights(C_hat, sharpness):
    C_hat = np.asarray(C_hat, dtype=np.float64)
    wx = np.exp(-sharpness * np.abs(np.diff(C_hat, axis=1)).mean(-1))
    wy = np.exp(-sharpness * np.abs(np.diff(C_hat, axis=0)).mean(-1))
    return wx, wy


def _smooth(maps, C_hat, sharpness):
    wx, wy = _edge_weights(C_hat, sharpness)
    total, grads = 0.0, []
    for X in maps:
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 2
        X3 = X[..., None] if squeeze else X
        dx = np.diff(X3, axis=1)
        dy = np.diff(X3, axis=0)
        total += float((np.abs(dx) * wx[..., None]).mean() + (np.abs(dy) * wy[..., None]).mean())
        gx = np.sign(dx) * wx[..., None] / dx.size
        gy = np.sign(dy) * wy[..., None] / dy.size
        g = np.zeros_like(X3)
        g[:, 1:] += gx
        g[:, :-1] -= gx
        g[1:] += gy
        g[:-1] -= gy
        grads.append(g[..., 0] if squeeze else g)
    return total, grads


def loss_smooth(B, R, M, C_hat, sharpness: float = EDGE_SHARPNESS) -> float:
    """Edge-aware first-difference penalty on the material maps.

    Each horizontal/vertical difference is weighted by
    ``exp(-sharpness * |difference of the target image|)`` so material edges
    that coincide with image edges cost almost nothing.
    """
    return _smooth((B, R, M), C_hat, sharpness)[0]


@dataclass(frozen=True)
class LossWeights:
    image: float = 1.0
    pbr: float = 1.0
    material: float = 1.0
    consistency: float = 0.1
    smooth: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


TERM_NAMES = ("image", "pbr", "material", "consistency", "smooth")


def loss_total(terms: dict[str, float], w: LossWeights) -> float:
    return float(sum(getattr(w, k) * terms.get(k, 0.0) for k in TERM_NAMES))


# --------------------------------------------------------------------------- supervision


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) linear, composited over black
    mask: np.ndarray  # (H, W) bool object mask
    albedo: Optional[np.ndarray] = None
    roughness: Optional[np.ndarray] = None
    metallic: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = (self.camera.height, self.camera.width)
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.shape != shape + (3,) or self.mask.shape != shape:
            raise ShapeMismatchError(f"view rasters must be {shape}, got {self.image.shape} / {self.mask.shape}")
        for name in ("albedo", "roughness", "metallic"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape[:2] != shape:
                    raise ShapeMismatchError(f"{name} map must be {shape}, got {v.shape}")
                setattr(self, name, v)

    @property
    def has_materials(self) -> bool:
        return self.albedo is not None or self.roughness is not None or self.metallic is not None


@dataclass
class SupervisionSet:
    views: list[View]

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i) -> View:
        return self.views[i]

    def without_materials(self) -> "SupervisionSet":
        return SupervisionSet([View(v.camera, v.image, v.mask) for v in self.views])


@dataclass
class ViewLoss:
    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]
    render: RenderOutput
    material_ablated: bool


def view_loss(
    cloud: GaussianCloud,
    lighting: SHLighting,
    view: View,
    weights: LossWeights = LossWeights(),
    samples: int = 64,
    settings: RasterSettings = RasterSettings(),
    *,
    normal_target: Optional[tuple[np.ndarray, np.ndarray]] = None,
    with_grad: bool = True,
) -> ViewLoss:
    """Total loss on one view and its gradient w.r.t. every parameter.

    The consistency target (pseudo-normals from the rendered depth) is a
    constant within a step; pass ``normal_target`` to pin it explicitly.
    """
    out = render(cloud, lighting, view.camera, samples, settings)
    terms, gmaps = {}, {}

    def add(key, map_name, value, grad):
        terms[key] = value
        w = getattr(weights, key)
        if w and grad is not None:
            gmaps[map_name] = gmaps.get(map_name, 0.0) + w * grad

    v, g = _masked_mse(out.color, view.image)
    add("image", "color", v, g)
    v, g = _masked_mse(out.pbr_color, view.image)
    add("pbr", "pbr_color", v, g)

    ablated = not view.has_materials
    v, mg = _material(out.albedo_map, out.roughness_map, out.metallic_map,
                      view.albedo, view.roughness, view.metallic, view.mask)
    terms["material"] = v
    if weights.material:
        for k, g in mg.items():
            gmaps[k] = gmaps.get(k, 0.0) + weights.material * g

    if normal_target is None:
        normal_target = consistency_target(out.depth, out.accum_alpha, view.camera)
    v, g = _consistency(out.normal, *normal_target)
    add("consistency", "normal", v, g)

    v, sg = _smooth((out.albedo_map, out.roughness_map, out.metallic_map), view.image, EDGE_SHARPNESS)
    terms["smooth"] = v
    if weights.smooth:
        for k, g in zip(("albedo_map", "roughness_map", "metallic_map"), sg):
            gmaps[k] = gmaps.get(k, 0.0) + weights.smooth * g

    total = loss_total(terms, weights)
    grads = render_backward(out, gmaps) if with_grad else {}
    return ViewLoss(total, terms, grads, out, ablated)


# --------------------------------------------------------------------------- optimizer


DEFAULT_LR = {
    "positions": 2e-4,
    "log_scales": 1e-3,
    "rotations": 1e-3,
    "opacity_raw": 5e-2,
    "colors": 1e-2,
    "normal_raw": 1e-2,
    "albedo": 1e-2,
    "roughness": 1e-2,
    "metallic": 1e-2,
    "sh": 1e-2,
}


class Adam:
    def __init__(self, lr: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr_scale: float = 1.0) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            lr = self.lr.get(k, 0.0) * lr_scale
            if g is None or lr == 0.0:
                out[k] = p
                continue
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# --------------------------------------------------------------------------- fitting


@dataclass
class FitConfig:
    iterations: int = 2000
    n_primitives: int = 64
    samples: int = 64
    seed: int = 0
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 100
    views_per_step: int = 1
    workers: int = 1
    init_opacity: float = 0.5
    init_scale: float = 0.5  # fraction of the hull-volume-per-primitive edge length
    init_radiance: float = 1.0
    exact_raster: bool = False
    lr_final: float = 0.1  # learning rates decay exponentially to this fraction

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.n_primitives < 1:
            raise ValueError("primitive budget must be >= 1")
        if self.views_per_step < 1 or self.workers < 1:
            raise ValueError("views_per_step and workers must be >= 1")
        if not 0.0 < self.lr_final <= 1.0:
            raise ValueError("lr_final must lie in (0, 1]")
        lr = dict(DEFAULT_LR)
        lr.update(self.learning_rates)
        self.learning_rates = lr
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    @property
    def raster_settings(self) -> RasterSettings:
        return RasterSettings(exact=self.exact_raster)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


class EmptySupervisionError(RelightGSError, ValueError):
    pass


def _hull_anchor(views: Sequence[View]) -> tuple[np.ndarray, float]:
    """Point nearest to all optical axes, and a radius visible from every camera."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for v in views:
        d = v.camera.rotation[:, 2]
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ v.camera.center
    center = np.linalg.lstsq(A, b, rcond=None)[0]
    radius = min(
        np.linalg.norm(v.camera.center - center) * 0.5 * min(v.camera.width / v.camera.focal[0],
                                                            v.camera.height / v.camera.focal[1])
        for v in views
    )
    return center, radius


def _inside_fraction(points: np.ndarray, views: Sequence[View]) -> np.ndarray:
    hits = np.zeros(len(points))
    for v in views:
        cam = v.camera
        t = cam.to_camera(points)
        z = np.maximum(t[:, 2], 1e-9)
        u = np.rint(cam.focal[0] * t[:, 0] / z + cam.principal_point[0]).astype(int)
        w = np.rint(cam.focal[1] * t[:, 1] / z + cam.principal_point[1]).astype(int)
        ok = (t[:, 2] > 0) & (u >= 0) & (u < cam.width) & (w >= 0) & (w < cam.height)
        inside = np.zeros(len(points), bool)
        inside[ok] = v.mask[w[ok], u[ok]]
        hits += inside
    return hits / len(views)


def initialize(sup: SupervisionSet, cfg: FitConfig) -> SceneAsset:
    """Seed ``K`` primitives uniformly inside the visual hull carved by the view masks."""
    views = sup.views
    if not views or not any(v.mask.any() for v in views):
        raise EmptySupervisionError("every view mask is empty; nothing to fit")
    rng = make_rng(cfg.seed)
    center, radius = _hull_anchor(views)
    K = cfg.n_primitives
    accepted, tried = [], 0
    batch = max(4096, 64 * K)
    best_pts, best_score = [], []
    while sum(len(a) for a in accepted) < K and tried < 200 * batch:
        pts = center + rng.uniform(-radius, radius, size=(batch, 3))
        frac = _inside_fraction(pts, views)
        accepted.append(pts[frac >= 1.0])
        best_pts.append(pts)
        best_score.append(frac)
        tried += batch
    pts = np.concatenate(accepted)
    inside_ratio = len(pts) / tried
    if len(pts) < K:
        # masks disagree (e.g. noisy silhouettes): fall back to the most-agreed points
        allp, alls = np.concatenate(best_pts), np.concatenate(best_score)
        pts = allp[np.argsort(-alls, kind="stable")[:K]]
        inside_ratio = max(inside_ratio, K / tried)
    pts = pts[:K]

    hull_volume = inside_ratio * (2 * radius) ** 3
    edge = (hull_volume / K) ** (1.0 / 3.0)
    centroid = pts.mean(axis=0)
    outward = pts - centroid
    norms = np.linalg.norm(outward, axis=1, keepdims=True)
    outward = np.where(norms > 1e-9, outward / np.maximum(norms, 1e-12), [0.0, 0.0, 1.0])

    cloud = GaussianCloud(
        positions=pts,
        log_scales=np.full((K, 3), np.log(cfg.init_scale * edge)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (K, 1)),
        opacity_raw=np.full(K, float(inverse_opacity(cfg.init_opacity))),
        colors=np.full((K, 3), 0.5),
        normal_raw=outward,
        albedo=np.full((K, 3), 0.5),
        roughness=np.full(K, 0.7),
        metallic=np.full(K, 0.1),
    )
    return SceneAsset(cloud, SHLighting.constant(cfg.init_radiance))


@dataclass
class FitResult:
    asset: SceneAsset
    trace: list[dict]

    def trace_csv(self) -> str:
        cols = ("iteration",) + TERM_NAMES + ("total",)
        lines = [",".join(cols)]
        for row in self.trace:
            lines.append(",".join(str(row["iteration"]) if c == "iteration" else repr(float(row[c])) for c in cols))
        return "\n".join(lines) + "\n"


def _params_of(asset: SceneAsset) -> dict[str, np.ndarray]:
    p = {k: v.copy() for k, v in asset.cloud.as_dict().items()}
    p["sh"] = asset.lighting.coefficients.copy()
    return p


def _asset_of(params: dict[str, np.ndarray]) -> SceneAsset:
    cloud = GaussianCloud(**{k: v for k, v in params.items() if k != "sh"}).clamped()
    return SceneAsset(cloud, SHLighting(params["sh"]))


def fit_scene(sup: SupervisionSet, cfg: FitConfig = FitConfig(), *, init: Optional[SceneAsset] = None) -> FitResult:
    """Fit a relightable cloud and SH lighting to posed images by Adam on the total loss."""
    asset = init if init is not None else initialize(sup, cfg)
    params = _params_of(asset)
    opt = Adam(cfg.learning_rates)
    rng = make_rng(cfg.seed + 1)
    settings = cfg.raster_settings
    nviews = len(sup)
    queue: list[int] = []
    trace = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.iterations):
            batch = []
            for _ in range(cfg.views_per_step):
                if not queue:
                    queue = list(rng.permutation(nviews))
                batch.append(queue.pop())
            asset = _asset_of(params)

            def run(i):
                return view_loss(asset.cloud, asset.lighting, sup[i], cfg.weights, cfg.samples, settings)

            results = list(pool.map(run, batch)) if pool else [run(i) for i in batch]
            grads = {k: sum(r.grads[k] for r in results) / len(results) for k in PARAM_NAMES}
            bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
            if bad:
                raise FloatingPointError(f"non-finite gradient for {bad} at iteration {it}")
            decay = cfg.lr_final ** (it / max(cfg.iterations - 1, 1))
            params = opt.step(params, grads, decay)
            # keep the stored parameters inside their valid ranges
            for k in ("colors", "albedo", "roughness", "metallic"):
                np.clip(params[k], 0.0, 1.0, out=params[k])
            row = {"iteration": it}
            for k in TERM_NAMES:
                row[k] = float(np.mean([r.terms[k] for r in results]))
            row["total"] = float(np.mean([r.total for r in results]))
            trace.append(row)
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
                log.info("iter %d total %.6f", it, row["total"])
    finally:
        if pool:
            pool.shutdown()
    return FitResult(_asset_of(params), trace)
