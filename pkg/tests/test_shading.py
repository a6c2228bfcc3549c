import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import front_camera, random_cloud, single
from oracles import quat_matrix, sh_reference
from relightgs.core import DiagnosticsError, SceneAsset, SHLighting
from relightgs.shading import (
    BRDFParams,
    EnvironmentMap,
    align_z,
    brdf_eval,
    fibonacci_hemisphere,
    fibonacci_sphere,
    hemisphere_lattice,
    incident_radiance,
    project_envmap_to_sh,
    relight,
    rotate_sh,
    sh_basis,
    sh_basis_batch,
    sh_basis_grad,
    shade_backward,
    shade_batch,
    shade_primitive,
)
from relightgs.synth import random_lighting

direction = arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: v / np.linalg.norm(v))


@given(direction)
def test_sh_basis_matches_table(d):
    np.testing.assert_allclose(sh_basis(d), sh_reference(d), atol=1e-12)


def test_sh_basis_rejects_non_unit():
    with pytest.raises(DiagnosticsError):
        sh_basis([0, 0, 2])


def test_sh_gradient_matches_finite_differences(rng):
    d = rng.normal(size=(5, 3))
    h = 1e-6
    G = sh_basis_grad(d)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (sh_basis_batch(d + e) - sh_basis_batch(d - e)) / (2 * h)
        np.testing.assert_allclose(G[..., i], fd, atol=1e-7)


def test_constant_lighting_radiance():
    np.testing.assert_allclose(incident_radiance(SHLighting.constant([1, 2, 3]), [0, 1, 0]), [1, 2, 3])


def test_lattice_layout():
    L = hemisphere_lattice(64)
    assert L.shape == (64, 3)
    np.testing.assert_allclose(np.linalg.norm(L, axis=1), 1)
    np.testing.assert_array_equal(L[0], [0, 0, 1])
    assert (L[:, 2] > 0).all()
    s = fibonacci_sphere(1000)
    assert abs(s.mean(0)).max() < 1e-2
    with pytest.raises(ValueError):
        hemisphere_lattice(0)


@given(direction)
def test_align_z_is_a_rotation_onto_n(n):
    R = align_z(n[None])[0]
    np.testing.assert_allclose(R @ [0, 0, 1], n, atol=1e-12)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_hemisphere_samples_follow_normal():
    hs = fibonacci_hemisphere([0, 3, 4], 32)
    assert hs.sample_count == 32
    assert (hs.directions @ hs.normal > 0).all()
    np.testing.assert_allclose(hs.directions[0], [0, 0.6, 0.8])


@settings(max_examples=60)
@given(direction, direction, arrays(np.float64, 3, elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_brdf_reciprocal_and_nonnegative(a, b, albedo, r, m):
    n = np.array([0, 0, 1.0])
    wi, wo = a * [1, 1, np.sign(a[2]) or 1], b * [1, 1, np.sign(b[2]) or 1]
    p = BRDFParams(n, albedo, r, m)
    f1, f2 = brdf_eval(p, wi, wo), brdf_eval(p, wo, wi)
    assert (f1 >= 0).all()
    np.testing.assert_allclose(f1, f2, rtol=1e-9)


def test_lambertian_brdf():
    p = BRDFParams(np.array([0, 0, 1.0]), np.array([0.2, 0.4, 0.6]), 0.5, 0.25)
    np.testing.assert_allclose(brdf_eval(p, [0, 0, 1], [0.6, 0, 0.8], specular=False), 0.75 * p.albedo / math.pi)


def test_shading_matches_brdf_quadrature(rng):
    g = single(normal=(0.3, -0.2, 0.9), albedo=(0.7, 0.5, 0.2), roughness=0.6, metallic=0.4)[0]
    L = random_lighting(rng)
    wo = np.array([0.1, 0.3, 1.0])
    wo /= np.linalg.norm(wo)
    M = 128
    hs = fibonacci_hemisphere(g.normal, M)
    p = BRDFParams.of(g)
    ref = sum(brdf_eval(p, d, wo) * incident_radiance(L, d) * (d @ g.normal) for d in hs.directions) * 2 * math.pi / M
    np.testing.assert_allclose(shade_primitive(g, L, wo, M), ref, rtol=1e-10)


def test_back_facing_normal_is_flipped(rng):
    L = random_lighting(rng)
    wo = np.array([0, 0, -1.0])
    front = shade_primitive(single(normal=(0, 0.1, -1))[0], L, wo, 64)
    back = shade_primitive(single(normal=(0, -0.1, 1))[0], L, wo, 64)
    np.testing.assert_allclose(front, back, atol=1e-12)


def test_rough_metal_does_not_create_energy():
    L = SHLighting.constant(1.0)
    for r in (0.3, 0.6, 1.0):
        out = shade_primitive(single(normal=(0, 0, 1), albedo=(1, 1, 1), roughness=r, metallic=1.0)[0],
                              L, [0, 0.5, 0.866], 1024)
        assert (out <= 1.0 + 1e-6).all()


def test_shading_backward_matches_finite_differences(rng):
    K, M = 4, 48
    n = rng.normal(size=(K, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    wo = n + rng.normal(scale=0.6, size=(K, 3))
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    b, r, m = rng.uniform(0.1, 0.9, (K, 3)), rng.uniform(0.3, 1, K), rng.uniform(0, 1, K)
    Lc = random_lighting(rng).coefficients
    gc = rng.normal(size=(K, 3))

    def f(n_, b_, r_, m_, L_):
        return (shade_batch(n_, b_, r_, m_, SHLighting(L_), wo, M).colors * gc).sum()

    g = shade_backward(shade_batch(n, b, r, m, SHLighting(Lc), wo, M), gc)
    args = [n, b, r, m, Lc]
    h = 1e-6
    for pos, analytic in enumerate((g.normals, g.albedo, g.roughness, g.metallic, g.lighting)):
        arr = args[pos]
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = [a.copy() for a in args], [a.copy() for a in args]
            plus[pos][idx] += h
            minus[pos][idx] -= h
            fd[idx] = (f(*plus) - f(*minus)) / (2 * h)
        np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_env_projection_recovers_band_limited_lighting():
    L = random_lighting(np.random.default_rng(3))
    env = EnvironmentMap.from_function(lambda d: np.maximum(sh_basis_batch(d) @ L.coefficients, 0.0), 256, 512)
    back = project_envmap_to_sh(env, 200_000, seed=1)
    assert np.abs(back.coefficients - L.coefficients).max() < 0.02


def test_env_projection_is_seeded():
    env = EnvironmentMap(np.random.default_rng(0).uniform(size=(8, 16, 3)))
    a, b = project_envmap_to_sh(env, 10_000, seed=4), project_envmap_to_sh(env, 10_000, seed=4)
    np.testing.assert_array_equal(a.coefficients, b.coefficients)
    with pytest.raises(ValueError):
        project_envmap_to_sh(env, 100)


def test_environment_map_validation():
    with pytest.raises(DiagnosticsError):
        EnvironmentMap(-np.ones((2, 4, 3)))
    with pytest.raises(ValueError):
        EnvironmentMap(np.ones((2, 4)))


def test_rotate_sh_moves_radiance(rng):
    L = random_lighting(rng)
    R = quat_matrix(rng.normal(size=4))
    Lr = rotate_sh(L, R)
    d = fibonacci_sphere(50)
    np.testing.assert_allclose(sh_basis_batch(d @ R.T) @ Lr.coefficients, sh_basis_batch(d) @ L.coefficients,
                               atol=1e-10)
    np.testing.assert_allclose(rotate_sh(L, np.eye(3)).coefficients, L.coefficients, atol=1e-12)


def test_relight_leaves_asset_untouched(rng):
    cloud = random_cloud(rng, 6)
    asset = SceneAsset(cloud, random_lighting(rng))
    before = {k: v.copy() for k, v in cloud.as_dict().items()}
    img = relight(asset, SHLighting.constant(0.5), front_camera(size=16), 32)
    assert img.shape == (16, 16, 3)
    assert all(np.array_equal(v, getattr(asset.cloud, k)) for k, v in before.items())
