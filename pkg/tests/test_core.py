import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_grid
from occsphere.core import (
    BadMagicError,
    BevMap,
    InvalidLabelError,
    Label,
    OverlapMask,
    Pose,
    RunOverrunError,
    SemanticGrid,
    TruncatedStreamError,
    UnsupportedVersionError,
    decode_bev,
    decode_grid,
    encode_bev,
    encode_grid,
    load_bev,
    load_grid,
    normalize_yaw,
    save_bev,
    save_grid,
    voxel_to_world,
    world_to_voxel,
)


def test_voxel_to_world_examples():
    g = SemanticGrid.empty((4, 4, 4), 0.5)
    assert tuple(voxel_to_world(g, (0, 0, 0))) == (0.25, 0.25, 0.25)
    assert tuple(voxel_to_world(g, (3, 0, 0))) == (1.75, 0.25, 0.25)


def test_voxel_to_world_bounds():
    g = SemanticGrid.empty((4, 4, 4), 0.5)
    with pytest.raises(IndexError):
        voxel_to_world(g, (4, 0, 0))
    with pytest.raises(IndexError):
        voxel_to_world(g, (0, -1, 0))
    with pytest.raises(IndexError):
        world_to_voxel(g, (-0.01, 0.1, 0.1))


def test_voxel_world_round_trip(rng):
    for _ in range(10_000 // 50):
        g = SemanticGrid.empty(tuple(int(v) for v in rng.integers(1, 200, 3)), float(rng.choice([0.1, 0.2, 0.5, 1.0])),
                               tuple(rng.uniform(-1e3, 1e3, 3)))
        for idx in rng.integers(0, g.dims, (50, 3)):
            assert world_to_voxel(g, voxel_to_world(g, idx)) == tuple(int(v) for v in idx)


def test_grid_invariants():
    with pytest.raises(ValueError):
        SemanticGrid(np.zeros((2, 2, 2), np.uint8), 0.0)
    with pytest.raises(ValueError):
        SemanticGrid(np.full((2, 2, 2), 18, np.uint8), 0.5)
    with pytest.raises(ValueError):
        SemanticGrid(np.zeros((0, 2, 2), np.uint8), 0.5)


def test_grid_is_immutable():
    g = SemanticGrid.empty((2, 2, 2), 0.5)
    with pytest.raises(ValueError):
        g.labels[0, 0, 0] = 1


def test_label_table():
    assert Label.EMPTY == 0
    assert max(Label) == 17
    assert Label.CAR.name == "CAR"


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_normalize_yaw_idempotent(y):
    n = normalize_yaw(y)
    assert -math.pi < n <= math.pi
    assert normalize_yaw(n) == n


def test_normalize_yaw_boundaries():
    assert normalize_yaw(math.pi) == math.pi
    assert normalize_yaw(-math.pi) == math.pi
    assert normalize_yaw(3 * math.pi) == pytest.approx(math.pi)


def test_pose_relative_round_trip(rng):
    for _ in range(100):
        ref = Pose(*rng.uniform(-10, 10, 3), rng.uniform(-4, 4))
        p = Pose(*rng.uniform(-10, 10, 3), rng.uniform(-4, 4))
        back = ref.compose(p.relative_to(ref))
        assert back.x == pytest.approx(p.x) and back.y == pytest.approx(p.y)
        assert math.cos(back.yaw - p.yaw) == pytest.approx(1.0)


def test_uniform_grid_single_run():
    g = SemanticGrid.empty((8, 8, 8), 0.5)
    data = encode_grid(g)
    assert data[-5:] == struct.pack("<IB", 512, 0)
    assert decode_grid(data) == g


def test_single_car_voxel_runs():
    labels = np.zeros((8, 8, 8), np.uint8)
    labels[0, 0, 0] = Label.CAR
    data = encode_grid(SemanticGrid(labels, 0.5))
    assert data[-10:] == struct.pack("<IB", 1, Label.CAR) + struct.pack("<IB", 511, 0)


def test_random_32_cube_round_trip(rng):
    g = random_grid(rng, (32, 32, 32))
    assert decode_grid(encode_grid(g)) == g


def test_header_layout():
    g = SemanticGrid.empty((2, 3, 4), 0.25, (1.0, -2.0, 3.5))
    data = encode_grid(g)
    assert data[:4] == b"OCC4"
    assert data[4] == 1
    assert struct.unpack_from("<3I", data, 5) == (2, 3, 4)
    assert struct.unpack_from("<d3d", data, 17) == (0.25, 1.0, -2.0, 3.5)


def test_codec_errors_are_distinct():
    g = SemanticGrid.empty((4, 4, 4), 0.5)
    data = bytearray(encode_grid(g))
    with pytest.raises(BadMagicError):
        decode_grid(b"XXXX" + bytes(data[4:]))
    with pytest.raises(TruncatedStreamError):
        decode_grid(bytes(data[:10]))
    with pytest.raises(TruncatedStreamError):
        decode_grid(bytes(data[:-2]))
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(UnsupportedVersionError):
        decode_grid(bytes(bad))
    over = bytes(data[:-5]) + struct.pack("<IB", 65, 0)
    with pytest.raises(RunOverrunError):
        decode_grid(over)
    short = bytes(data[:-5]) + struct.pack("<IB", 63, 0)
    with pytest.raises(TruncatedStreamError):
        decode_grid(short)
    inv = bytes(data[:-5]) + struct.pack("<IB", 64, 18)
    with pytest.raises(InvalidLabelError):
        decode_grid(inv)
    assert len({BadMagicError, TruncatedStreamError, RunOverrunError, InvalidLabelError}) == 4


def test_bev_round_trip_and_magic(rng, tmp_path):
    cells = rng.integers(0, 5, (7, 9)).astype(np.uint8)
    bev = BevMap(cells, 0.5, (3.0, -1.5))
    data = encode_bev(bev)
    assert data[:4] == b"BEV2"
    assert decode_bev(data) == bev
    with pytest.raises(BadMagicError):
        decode_bev(encode_grid(SemanticGrid.empty((2, 2, 2), 0.5)))
    save_bev(bev, tmp_path / "a.bev")
    assert load_bev(tmp_path / "a.bev") == bev


def test_file_round_trip(rng, tmp_path):
    g = random_grid(rng)
    save_grid(g, tmp_path / "g.occ4")
    assert load_grid(tmp_path / "g.occ4") == g


def test_overlap_mask_dims():
    m = OverlapMask.ones((2, 3, 4))
    assert m.dims == (2, 3, 4)
    assert m.bits.all()
