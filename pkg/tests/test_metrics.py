import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from helpers import random_cloud
from oracles import brute_chamfer, brute_fscore, ssim_constant
from relightgs.core import SceneAsset, SHLighting, inverse_opacity
from relightgs.metrics import chamfer_distance, extract_point_cloud, f_score, psnr, ssim, to_gray


def test_psnr_cases():
    a = np.zeros((5, 5, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a + 1.0) == 0.0
    with pytest.raises(ValueError):
        psnr(a, np.zeros((5, 5)))


def test_ssim_cases(rng):
    img = rng.uniform(size=(20, 24, 3))
    assert ssim(img, img) == 1.0
    assert ssim(np.full((12, 12), 0.2), np.full((12, 12), 0.7)) == pytest.approx(ssim_constant(0.2, 0.7), rel=1e-12)
    assert ssim(img, 1 - img) < 0.2
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 19), elements=st.floats(0, 1)), arrays(np.float64, (16, 19), elements=st.floats(0, 1)))
def test_ssim_agrees_with_scikit_image(a, b):
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_gray_conversion():
    np.testing.assert_allclose(to_gray(np.ones((2, 2, 3))), 1.0)
    assert to_gray(np.array([[[0, 1.0, 0]]]))[0, 0] == 0.587
    with pytest.raises(ValueError):
        to_gray(np.zeros((2, 2, 4)))


def test_chamfer_examples():
    a = np.zeros((1, 3))
    b = np.array([[3.0, 4.0, 0.0], [0, 0, 1.0]])
    # a->b nearest is 1, b->a distances are 5 and 1
    assert chamfer_distance(a, b) == pytest.approx(0.5 * (1.0 + 3.0))
    assert chamfer_distance(b, b) == 0.0
    assert f_score(a, b, tau=1.0) == pytest.approx(2 * 1.0 * 0.5 / 1.5)
    assert f_score(a, b + 10, tau=0.5) == 0.0
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), b)
    with pytest.raises(ValueError):
        f_score(a, b, tau=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31), st.floats(0.01, 1.0))
def test_kdtree_metrics_match_brute_force(n, m, seed, tau):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(n, 3)), rng.uniform(size=(m, 3))
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a, b), abs=1e-12)
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-15)
    assert f_score(a, b, tau) == pytest.approx(brute_fscore(a, b, tau), abs=1e-12)


def test_point_extraction_filters_by_opacity(rng):
    cloud = random_cloud(rng, 5).replace(opacity_raw=inverse_opacity(np.array([0.1, 0.6, 0.4, 0.9, 0.5])))
    pts = extract_point_cloud(SceneAsset(cloud, SHLighting.constant(1.0)))
    np.testing.assert_array_equal(pts, cloud.positions[[1, 3, 4]])
    with pytest.raises(ValueError):
        extract_point_cloud(SceneAsset(cloud, SHLighting.constant(1.0)), opacity_min=0.95)
