"""Independent reference implementations used as test oracles.

Nothing here imports the package's rasterizer or shading internals; every
routine is the most direct transcription of the math it checks.
"""
import numpy as np


def quat_matrix(q):
    w, x, y, z = np.asarray(q, float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def naive_render(positions, log_scales, rotations, opacity_raw, channels, focal, pp, resolution,
                 cam_rot, cam_center, low_pass=0.3, near=0.01):
    """Evaluate every primitive at every pixel, full sort by depth, blend with no thresholds."""
    W, H = resolution
    K = len(positions)
    Wc = np.asarray(cam_rot).T
    screen = []
    for i in range(K):
        t = Wc @ (positions[i] - cam_center)
        if t[2] <= near:
            continue
        R = quat_matrix(rotations[i])
        S = np.diag(np.exp(log_scales[i]) ** 2)
        cov = R @ S @ R.T
        J = np.array([[focal[0] / t[2], 0, -focal[0] * t[0] / t[2] ** 2],
                      [0, focal[1] / t[2], -focal[1] * t[1] / t[2] ** 2]])
        c2 = J @ Wc @ cov @ Wc.T @ J.T + low_pass * np.eye(2)
        m = np.array([focal[0] * t[0] / t[2] + pp[0], focal[1] * t[1] / t[2] + pp[1]])
        op = 1.0 / (1.0 + np.exp(-opacity_raw[i]))
        screen.append((t[2], i, m, np.linalg.inv(c2), op))
    screen.sort(key=lambda s: (s[0], s[1]))
    C = channels.shape[1]
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    T = np.ones((H, W))
    out = np.zeros((H, W, C + 2))
    # front to back over the fully sorted list, every pixel at once
    for z, i, m, Q, op in screen:
        du, dv = u - m[0], v - m[1]
        a = op * np.exp(-0.5 * (Q[0, 0] * du * du + 2 * Q[0, 1] * du * dv + Q[1, 1] * dv * dv))
        out += (T * a)[..., None] * np.concatenate([channels[i], [z, 1.0]])
        T = T * (1.0 - a)
    return out


def brute_nearest(a, b):
    """Distance from each point of ``a`` to its nearest point of ``b`` by full pairwise search."""
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)


def brute_chamfer(a, b):
    return 0.5 * (brute_nearest(a, b).mean() + brute_nearest(b, a).mean())


def brute_fscore(a, b, tau):
    p = (brute_nearest(a, b) <= tau).mean()
    r = (brute_nearest(b, a) <= tau).mean()
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def sh_reference(d):
    """Real SH bands 0..3 written out term by term from the standard tables."""
    x, y, z = d
    pi = np.pi
    return np.array([
        0.5 * np.sqrt(1 / pi),
        np.sqrt(3 / (4 * pi)) * y,
        np.sqrt(3 / (4 * pi)) * z,
        np.sqrt(3 / (4 * pi)) * x,
        0.5 * np.sqrt(15 / pi) * x * y,
        0.5 * np.sqrt(15 / pi) * y * z,
        0.25 * np.sqrt(5 / pi) * (3 * z * z - 1),
        0.5 * np.sqrt(15 / pi) * x * z,
        0.25 * np.sqrt(15 / pi) * (x * x - y * y),
        0.25 * np.sqrt(35 / (2 * pi)) * y * (3 * x * x - y * y),
        0.5 * np.sqrt(105 / pi) * x * y * z,
        0.25 * np.sqrt(21 / (2 * pi)) * y * (5 * z * z - 1),
        0.25 * np.sqrt(7 / pi) * z * (5 * z * z - 3),
        0.25 * np.sqrt(21 / (2 * pi)) * x * (5 * z * z - 1),
        0.25 * np.sqrt(105 / pi) * z * (x * x - y * y),
        0.25 * np.sqrt(35 / (2 * pi)) * x * (x * x - 3 * y * y),
    ])


def ssim_constant(mu_a, mu_b, k1=0.01):
    """SSIM of two constant images: only the luminance term survives."""
    c1 = k1**2
    return (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
