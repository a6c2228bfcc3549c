"""Small scene builders shared by the test modules."""
import numpy as np

from relightgs.core import Camera, GaussianCloud, inverse_opacity


def random_cloud(rng, K, extent=0.5, scale=(0.05, 0.2), opacity=(0.3, 0.95)):
    n = rng.normal(size=(K, 3))
    return GaussianCloud(
        positions=rng.uniform(-extent, extent, size=(K, 3)),
        log_scales=np.log(rng.uniform(*scale, size=(K, 3))),
        rotations=rng.normal(size=(K, 4)),
        opacity_raw=inverse_opacity(rng.uniform(*opacity, size=K)),
        colors=rng.uniform(size=(K, 3)),
        normal_raw=n / np.linalg.norm(n, axis=1, keepdims=True),
        albedo=rng.uniform(0.1, 0.9, size=(K, 3)),
        roughness=rng.uniform(0.3, 1.0, size=K),
        metallic=rng.uniform(0.0, 0.8, size=K),
    )


def single(position=(0, 0, 0), log_scale=(0, 0, 0), rotation=(1, 0, 0, 0), opacity_raw=0.0,
           color=(0.5, 0.5, 0.5), normal=(0, 0, -1), albedo=(0.5, 0.5, 0.5), roughness=0.5, metallic=0.0):
    return GaussianCloud(
        positions=np.array([position], float),
        log_scales=np.array([log_scale], float),
        rotations=np.array([rotation], float),
        opacity_raw=np.array([opacity_raw], float),
        colors=np.array([color], float),
        normal_raw=np.array([normal], float),
        albedo=np.array([albedo], float),
        roughness=np.array([roughness], float),
        metallic=np.array([metallic], float),
    )


def front_camera(size=64, focal=80.0, distance=3.0):
    """Camera on the -z axis looking at the origin (identity orientation)."""
    return Camera(focal=focal, principal_point=((size - 1) / 2, (size - 1) / 2),
                  resolution=(size, size), center=(0.0, 0.0, -distance))


def orbit_camera(rng, size=64, focal=80.0, distance=3.0):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return Camera.look_at(distance * d, (0, 0, 0), up=(0, 0, 1) if abs(d[2]) < 0.95 else (0, 1, 0),
                          focal=focal, resolution=(size, size))
