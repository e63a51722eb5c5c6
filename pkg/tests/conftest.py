import numpy as np
import pytest

from occsphere.core import SemanticGrid


def random_grid(rng, dims=None, density=0.3, max_label=17, vs=None, origin=None):
    dims = dims or tuple(int(v) for v in rng.integers(1, 12, 3))
    occ = rng.random(dims) < density
    labels = np.where(occ, rng.integers(1, max_label + 1, dims), 0).astype(np.uint8)
    vs = vs if vs is not None else float(rng.choice([0.25, 0.5, 1.0, 0.2]))
    origin = origin if origin is not None else tuple(float(v) for v in rng.uniform(-50, 50, 3))
    return SemanticGrid(labels, vs, origin)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, axis_aligned=False):
    if axis_aligned:
        while True:
            perm = np.eye(3)[rng.permutation(3)] * rng.choice([-1.0, 1.0], 3)[:, None]
            if np.linalg.det(perm) > 0:
                return perm
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, grid, width=32, height=32):
    """Camera somewhere around ``grid``; half the time axis-aligned on voxel planes to provoke ties."""
    from occsphere.projector import CameraModel

    ext = np.asarray(grid.dims) * grid.voxel_size
    aligned = rng.random() < 0.5
    R = random_rotation(rng, aligned)
    if aligned:
        steps = rng.integers(-2, np.asarray(grid.dims) + 3)
        center = np.asarray(grid.origin) + steps * grid.voxel_size
        fx = fy = float(rng.choice([8.0, 16.0, 32.0]))
        cx, cy = width / 2.0, height / 2.0
    else:
        center = np.asarray(grid.origin) + rng.uniform(-0.5, 1.5, 3) * ext
        fx = float(rng.uniform(5, 40))
        fy = fx * float(rng.uniform(0.8, 1.25))
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
    return CameraModel(fx, fy, cx, cy, width, height, R, -R @ center)
