import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from relightgs import RelightableGaussianRegressor
from relightgs.core import SHLighting
from relightgs.synth import make_scene


@pytest.fixture(scope="module")
def scene():
    return make_scene(seed=5, n_primitives=6, n_views=3, resolution=(24, 24), samples=8)


def test_params_and_clone():
    est = RelightableGaussianRegressor(n_primitives=12, iterations=3)
    params = est.get_params()
    assert params["n_primitives"] == 12 and params["lr_final"] == 0.1
    twin = clone(est.set_params(samples=4))
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "asset_")


def test_fit_predict_score(scene):
    sup = scene.supervision()
    est = RelightableGaussianRegressor(n_primitives=8, iterations=5, samples=8).fit(sup.views)
    assert est.n_views_in_ == 3 and len(est.trace_) == 5
    imgs = est.predict(scene.cameras)
    assert imgs.shape == (3, 24, 24, 3)
    np.testing.assert_array_equal(est.predict(sup)[0], imgs[0])
    relit = est.predict(scene.cameras[0], lighting=SHLighting.constant(0.0))
    assert relit.shape == (1, 24, 24, 3) and not relit.any()
    assert np.isfinite(est.score(sup))


def test_refit_from_ground_truth_scores_high(scene):
    sup = scene.supervision()
    est = RelightableGaussianRegressor(iterations=0, samples=8).fit(sup, init=scene.asset)
    assert est.score(sup) == np.inf


def test_input_validation(scene):
    est = RelightableGaussianRegressor(iterations=1, n_primitives=2, samples=4)
    with pytest.raises(NotFittedError):
        est.predict(scene.cameras)
    with pytest.raises(TypeError):
        est.fit([np.zeros((4, 4, 3))])
    with pytest.raises(ValueError):
        est.fit([])
    with pytest.raises(TypeError):
        RelightableGaussianRegressor(iterations=2.5).fit(scene.supervision())
    with pytest.raises(ValueError):
        RelightableGaussianRegressor(samples=0).fit(scene.supervision())
    fitted = est.fit(scene.supervision())
    with pytest.raises(TypeError):
        fitted.predict(["camera"])
    with pytest.raises(ValueError):
        fitted.predict(scene.cameras, lighting=np.full((16, 3), np.nan))


def test_weights_accept_mapping_and_sequence(scene):
    sup = scene.supervision()
    a = RelightableGaussianRegressor(iterations=2, n_primitives=3, samples=4, weights={"material": 0.0}).fit(sup)
    b = RelightableGaussianRegressor(iterations=2, n_primitives=3, samples=4, weights=(1, 1, 0, 0.1, 0.01)).fit(sup)
    assert [r["total"] for r in a.trace_] == [r["total"] for r in b.trace_]
