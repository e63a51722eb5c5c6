import math

import numpy as np
import pytest

from conftest import random_camera, random_grid
from occsphere import kernels
from occsphere.core import Label, Pose, SemanticGrid
from occsphere.projector import (
    CameraError,
    CameraModel,
    CameraRig,
    cast_ray,
    default_rig,
    load_rig,
    read_image,
    render_rig,
    render_view,
    write_image,
)
from oracles import flood_fill_6, march_rays


def one_voxel(dims, idx, label=Label.CAR, vs=0.5, origin=(0.0, 0.0, 0.0)):
    labels = np.zeros(dims, np.uint8)
    labels[idx] = label
    return SemanticGrid(labels, vs, origin)


def test_cast_ray_empty_grid_misses():
    assert cast_ray(SemanticGrid.empty((4, 4, 4), 0.5), (-1, 1, 1), (1, 0, 0)) is None


def test_cast_ray_axis_aligned_slab():
    g = one_voxel((4, 4, 4), (0, 0, 0))
    assert cast_ray(g, (-1.0, 0.25, 0.25), (1, 0, 0)) == (int(Label.CAR), 1.0)


def test_cast_ray_returns_nearer_label():
    labels = np.zeros((8, 4, 4), np.uint8)
    labels[3, 1, 1] = Label.PEDESTRIAN
    labels[6, 1, 1] = Label.BUS
    g = SemanticGrid(labels, 0.5)
    assert cast_ray(g, (-1, 0.75, 0.75), (1, 0, 0)) == (int(Label.PEDESTRIAN), 2.5)
    assert cast_ray(g, (5, 0.75, 0.75), (-1, 0, 0)) == (int(Label.BUS), 1.5)


def test_face_tie_goes_to_smaller_index():
    labels = np.zeros((4, 4, 4), np.uint8)
    labels[2, 0, 1] = Label.CAR
    labels[2, 0, 2] = Label.BUS
    g = SemanticGrid(labels, 0.5)
    # ray runs exactly on the z = 1.0 plane between k = 1 and k = 2
    assert cast_ray(g, (-1, 0.25, 1.0), (1, 0, 0)) == (int(Label.CAR), 2.0)


def test_edge_graze_is_not_a_hit():
    g = one_voxel((4, 4, 4), (1, 1, 1))
    # diagonal through the corner point (0.5, 0.5) of voxel (1, 1, *) only
    assert cast_ray(g, (0.0, 1.0, 0.75), (1, -1, 0)) is None


def test_cast_ray_inside_occupied_voxel_has_zero_depth():
    g = one_voxel((4, 4, 4), (1, 1, 1))
    assert cast_ray(g, (0.7, 0.7, 0.7), (0, 0, 1)) == (int(Label.CAR), 0.0)


def test_cast_ray_errors():
    g = SemanticGrid.empty((2, 2, 2), 0.5)
    with pytest.raises(ValueError):
        cast_ray(g, (math.nan, 0, 0), (1, 0, 0))
    with pytest.raises(ValueError):
        cast_ray(g, (0, 0, 0), (0, 0, 0))


def test_render_empty_world():
    cam = CameraModel.from_fov(16, 12, 1.2)
    img = render_view(SemanticGrid.empty((8, 8, 8), 0.5), cam)
    assert img.dims == (12, 16)
    assert not img.labels.any()
    assert np.all(np.isinf(img.depth))


def test_single_voxel_on_axis_blob():
    # voxel centered 10 m ahead of a camera at the origin looking along +x
    vs = 0.5
    g = one_voxel((3, 3, 3), (1, 1, 1), origin=(10 - 1.5 * vs, -1.5 * vs, -1.5 * vs))
    intr = CameraModel.from_fov(41, 31, math.radians(20))
    cam = CameraModel.at_pose(intr, (0, 0, 0), 0.0)
    img = render_view(g, cam)
    hit = img.labels != 0
    v, u = int(intr.cy), int(intr.cx)
    assert hit[v, u]
    depth = img.depth[hit]
    assert np.all((depth >= 10 - vs - 1e-6) & (depth <= 10 + 1e-6))
    # contiguity: flood the hit mask from the principal pixel
    reach = flood_fill_6(hit[:, :, None], [(v, u, 0)])[:, :, 0]
    assert np.array_equal(reach, hit)


def test_rotation_must_be_orthonormal():
    with pytest.raises(CameraError):
        CameraModel(10, 10, 5, 5, 10, 10, np.diag([1.0, 1.0, 1.0 + 1e-6]))
    with pytest.raises(CameraError):
        CameraModel(0, 10, 5, 5, 10, 10)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_render_matches_oracle(backend):
    rng = np.random.default_rng(7)
    with kernels.use_backend(backend):
        for _ in range(20):
            g = random_grid(rng, (16, 16, 16), density=rng.uniform(0.01, 0.2))
            cam = random_camera(rng, g)
            img = render_view(g, cam)
            o, d = cam.pixel_rays()
            lab, dep = march_rays(g.labels, g.origin, g.voxel_size, o, d)
            assert np.array_equal(img.labels.reshape(-1), lab)
            assert np.array_equal(img.depth.reshape(-1), dep.astype(np.float32))


def test_backends_bit_identical():
    if len(kernels.available_backends()) < 2:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(3)
    g = random_grid(rng, (24, 20, 12), density=0.05)
    cam = random_camera(rng, g, 48, 40)
    with kernels.use_backend("numba"):
        a = render_view(g, cam)
    with kernels.use_backend("numpy"):
        b = render_view(g, cam)
    assert a == b


def test_depth_label_consistency():
    rng = np.random.default_rng(11)
    g = random_grid(rng, (16, 16, 16), density=0.05)
    cam = random_camera(rng, g)
    img = render_view(g, cam)
    o, d = cam.pixel_rays()
    lab, dep = kernels.cast_rays(g.labels, g.origin, g.voxel_size, o, d)
    assert np.array_equal(img.labels.reshape(-1), lab)
    for r in np.flatnonzero(lab)[:200]:
        # a point just past the entry lies in a voxel carrying the returned label
        p = o[r] + d[r] * (dep[r] + 1e-7)
        idx = np.floor((p - np.asarray(g.origin)) / g.voxel_size).astype(int)
        assert g.labels[tuple(idx)] == lab[r]


def test_render_is_pure():
    rng = np.random.default_rng(5)
    g = random_grid(rng, (16, 16, 16))
    cam = random_camera(rng, g)
    assert render_view(g, cam) == render_view(g, cam)


def ahead_world():
    # ego at the grid center, one tall voxel column 6 m ahead along +x
    labels = np.zeros((40, 40, 8), np.uint8)
    labels[32, 20, 0:6] = Label.BUS
    return SemanticGrid(labels, 0.5, (-10.0, -10.0, 0.0))


def test_voxel_ahead_in_front_not_back():
    rig = default_rig(24, 32)
    imgs = render_rig(ahead_world(), rig, Pose(0.0, 0.25, 0.0, 0.0))
    assert imgs["front"].labels.any()
    assert not imgs["back"].labels.any()


def test_yaw_pi_swaps_front_and_back():
    rig = default_rig(24, 32)
    w = ahead_world()
    a = render_rig(w, rig, Pose(0.0, 0.25, 0.0, 0.0))
    b = render_rig(w, rig, Pose(0.0, 0.25, 0.0, math.pi))
    assert np.array_equal(a["front"].labels, b["back"].labels)
    assert np.array_equal(a["back"].labels, b["front"].labels)


def test_identity_rig_matches_render_view():
    rng = np.random.default_rng(2)
    g = random_grid(rng, (16, 16, 16), origin=(-4.0, -4.0, -4.0), vs=0.5)
    cam = CameraModel.from_fov(20, 16, 1.0, np.eye(3), np.zeros(3))
    rig = CameraRig((("only", cam),))
    ego = Pose(0.3, -0.2, 0.1, 0.7)
    got = render_rig(g, rig, ego)["only"]
    # the same camera placed directly in the world at the ego pose
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    R_we = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    placed = cam.with_extrinsics(R_we.T, -R_we.T @ np.array([ego.x, ego.y, ego.z]))
    assert got == render_view(g, placed)


def test_unknown_view_rejected():
    with pytest.raises(KeyError):
        render_rig(ahead_world(), default_rig(8, 8), Pose(0, 0, 0, 0), views=["nope"])


def test_rig_workers_deterministic():
    rig = default_rig(16, 24)
    w = ahead_world()
    assert render_rig(w, rig, Pose(0, 0, 1, 0.3), workers=1) == render_rig(w, rig, Pose(0, 0, 1, 0.3), workers=4)


def test_unique_view_names():
    cam = CameraModel.from_fov(8, 8, 1.0)
    with pytest.raises(ValueError):
        CameraRig((("a", cam), ("a", cam)))


def test_image_files_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    g = random_grid(rng, (16, 16, 16), density=0.05)
    img = render_view(g, random_camera(rng, g))
    pgm, dep = write_image(img, tmp_path / "view")
    assert open(pgm, "rb").read(2) == b"P5"
    assert read_image(tmp_path / "view") == img


def test_rig_file(tmp_path):
    p = tmp_path / "rig.ini"
    p.write_text("[rig]\nwidth = 20\nheight = 10\n\n[view front]\nyaw_deg = 0\n\n[view left]\nyaw_deg = 90\n"
                 "mount = 1, 0, 1.5\n")
    rig = load_rig(p)
    assert rig.names == ["front", "left"]
    assert rig["left"].width == 20
    np.testing.assert_allclose(rig["left"].center, [1, 0, 1.5], atol=1e-12)
