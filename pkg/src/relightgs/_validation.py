"""Input checks shared by the estimator API."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .core import Camera, SHLighting
from .optim import SupervisionSet, View


def check_views(X) -> SupervisionSet:
    """Accept a :class:`SupervisionSet` or any iterable of :class:`View`."""
    if isinstance(X, SupervisionSet):
        views = list(X.views)
    elif isinstance(X, View):
        views = [X]
    else:
        try:
            views = list(X)
        except TypeError:
            raise TypeError(f"expected views, got {type(X).__name__}") from None
    bad = [type(v).__name__ for v in views if not isinstance(v, View)]
    if bad:
        raise TypeError(f"expected View items, got {sorted(set(bad))}")
    if not views:
        raise ValueError("need at least one view")
    return SupervisionSet(views)


def check_cameras(X) -> list[Camera]:
    """Cameras from a camera, an iterable of cameras, or views (their cameras)."""
    if isinstance(X, Camera):
        return [X]
    if isinstance(X, (SupervisionSet, View)):
        return [v.camera for v in check_views(X).views]
    items: Iterable = X
    out = []
    for item in items:
        if isinstance(item, Camera):
            out.append(item)
        elif isinstance(item, View):
            out.append(item.camera)
        else:
            raise TypeError(f"expected Camera or View items, got {type(item).__name__}")
    if not out:
        raise ValueError("need at least one camera")
    return out


def check_lighting(L) -> SHLighting:
    if isinstance(L, SHLighting):
        return L
    arr = np.asarray(L, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("lighting coefficients must be finite")
    return SHLighting(arr)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)
