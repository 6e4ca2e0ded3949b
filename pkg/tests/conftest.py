import numpy as np
import pytest
import torch

from polgs.scene import Camera, GaussianSurfel, SurfelCloud


def frontal_camera(width=32, height=32, f=40.0, distance=4.0, name="view"):
    """Camera on the -z axis looking at the origin (world z maps to camera z)."""
    T = np.eye(4)
    T[2, 3] = distance
    return Camera(f, f, width / 2, height / 2, width, height, T, name)


def random_cloud(n, rng, spread=0.6, scale=(0.05, 0.2), opacity=(0.3, 0.95)):
    q = rng.normal(size=(n, 4))
    surfels = [
        GaussianSurfel(rng.uniform(-spread, spread, 3), rng.uniform(*scale, 2), q[i] / np.linalg.norm(q[i]),
                       float(rng.uniform(*opacity)), rng.uniform(0, 1, 3))
        for i in range(n)
    ]
    return SurfelCloud.from_surfels(surfels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return frontal_camera()


def brute_force_composite(proj, width, height):
    """Per-pixel reference: every surfel, globally sorted by center depth, blended serially."""
    from polgs.rasterizer import blend_pixel

    m = proj.means2d.detach().numpy()
    con = proj.conic.detach().numpy()
    op = proj.opacity.detach().numpy()
    col = proj.color.detach().numpy()
    nrm = proj.normal.detach().numpy()
    z = proj.depth.detach().numpy()
    g = proj.depth_grad.detach().numpy()
    order = [i for i in np.argsort(z, kind="stable") if proj.valid[i]]
    C = np.zeros((height, width, 3))
    D = np.zeros((height, width))
    N = np.zeros((height, width, 3))
    A = np.zeros((height, width))
    for i in range(height):
        for j in range(width):
            u = np.array([j + 0.5, i + 0.5])
            d = u - m[order]
            pw = 0.5 * (con[order, 0] * d[:, 0] ** 2 + con[order, 2] * d[:, 1] ** 2) + con[order, 1] * d[:, 0] * d[:, 1]
            a = np.minimum(op[order] * np.exp(-pw), 0.99)
            depth = z[order] + (g[order] * d).sum(-1)
            C[i, j], D[i, j], N[i, j], A[i, j] = blend_pixel(a, col[order], depth, nrm[order])
    return C, D, N, A
