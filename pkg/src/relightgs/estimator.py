"""scikit-learn style wrapper: ``fit`` on posed views, ``predict`` images for cameras."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_cameras, check_lighting, check_positive_int, check_views
from .core import SceneAsset
from .metrics import psnr
from .optim import DEFAULT_LR, FitConfig, LossWeights, fit_scene
from .render import render
from .splatting import RasterSettings


class RelightableGaussianRegressor(BaseEstimator):
    """Per-scene fit of relightable Gaussians and SH lighting.

    ``X`` for :meth:`fit` is a sequence of :class:`~relightgs.optim.View`
    (or a :class:`~relightgs.optim.SupervisionSet`); ``y`` is ignored because
    the targets live inside the views.  :meth:`predict` takes cameras (or
    views) and returns PBR images, optionally under new lighting.

    Fitted attributes: ``asset_``, ``trace_``, ``n_views_in_``.
    """

    def __init__(self, n_primitives=64, iterations=2000, samples=64, seed=0, workers=1,
                 views_per_step=1, weights=None, learning_rates=None, lr_final=0.1,
                 exact_raster=False, render_samples=None):
        self.n_primitives = n_primitives
        self.iterations = iterations
        self.samples = samples
        self.seed = seed
        self.workers = workers
        self.views_per_step = views_per_step
        self.weights = weights
        self.learning_rates = learning_rates
        self.lr_final = lr_final
        self.exact_raster = exact_raster
        self.render_samples = render_samples

    def _config(self) -> FitConfig:
        w = self.weights
        if w is None:
            w = LossWeights()
        elif isinstance(w, dict):
            w = LossWeights(**w)
        elif not isinstance(w, LossWeights):
            w = LossWeights(*w)
        return FitConfig(
            iterations=check_positive_int(self.iterations, "iterations", 0),
            n_primitives=check_positive_int(self.n_primitives, "n_primitives"),
            samples=check_positive_int(self.samples, "samples"),
            seed=int(self.seed),
            workers=check_positive_int(self.workers, "workers"),
            views_per_step=check_positive_int(self.views_per_step, "views_per_step"),
            learning_rates=dict(DEFAULT_LR, **(self.learning_rates or {})),
            weights=w,
            lr_final=float(self.lr_final),
            exact_raster=bool(self.exact_raster),
            log_every=0,
        )

    def fit(self, X, y=None, init: SceneAsset | None = None):
        sup = check_views(X)
        result = fit_scene(sup, self._config(), init=init)
        self.asset_ = result.asset
        self.trace_ = result.trace
        self.n_views_in_ = len(sup)
        return self

    def predict(self, X, lighting=None):
        """PBR images for each camera, stacked when they share a resolution."""
        check_is_fitted(self, "asset_")
        cams = check_cameras(X)
        L = self.asset_.lighting if lighting is None else check_lighting(lighting)
        M = self.render_samples or self.samples
        settings = RasterSettings(exact=self.exact_raster)
        imgs = [render(self.asset_.cloud, L, c, M, settings).pbr_color for c in cams]
        if len({im.shape for im in imgs}) == 1:
            return np.stack(imgs)
        return imgs

    def score(self, X, y=None):
        """Mean PSNR (dB) of predicted PBR images against the views' images."""
        sup = check_views(X)
        preds = self.predict(sup)
        return float(np.mean([psnr(p, v.image) for p, v in zip(preds, sup.views)]))
