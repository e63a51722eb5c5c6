"""Voxel data model, coordinate conventions and the .occ4 / .bev codecs.

Axis convention: grid index ``(i, j, k)`` maps to world ``(x, y, z)`` with
``z`` pointing up. Labels are stored as a C-ordered ``uint8`` array of shape
``(H, W, D)``, so the flattened array is the row-major label stream.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "Label",
    "FOREGROUND",
    "NUM_CLASSES",
    "BevCode",
    "SemanticGrid",
    "BevMap",
    "Pose",
    "OverlapMask",
    "normalize_yaw",
    "voxel_to_world",
    "world_to_voxel",
    "encode_grid",
    "decode_grid",
    "encode_bev",
    "decode_bev",
    "save_grid",
    "load_grid",
    "save_bev",
    "load_bev",
    "CodecError",
    "BadMagicError",
    "TruncatedStreamError",
    "RunOverrunError",
    "InvalidLabelError",
]


class Label(IntEnum):
    """Fixed semantic class table. Code 0 is air."""

    EMPTY = 0
    DRIVABLE_SURFACE = 1
    SIDEWALK = 2
    BUILDING = 3
    VEGETATION = 4
    CAR = 5
    PEDESTRIAN = 6
    BUS = 7
    TRUCK = 8
    BICYCLE = 9
    MOTORCYCLE = 10
    TRAILER = 11
    CONSTRUCTION_VEHICLE = 12
    TRAFFIC_CONE = 13
    BARRIER = 14
    OTHER_FLAT = 15
    TERRAIN = 16
    OTHER_OBJECT = 17


NUM_CLASSES = 17
FOREGROUND = frozenset(
    {
        Label.CAR,
        Label.PEDESTRIAN,
        Label.BUS,
        Label.TRUCK,
        Label.BICYCLE,
        Label.MOTORCYCLE,
        Label.TRAILER,
        Label.CONSTRUCTION_VEHICLE,
    }
)


class BevCode(IntEnum):
    EMPTY = 0
    DRIVABLE = 1
    LANE_DIVIDER = 2
    SIDEWALK = 3
    JUNCTION = 4


ROAD_CODES = (BevCode.DRIVABLE, BevCode.LANE_DIVIDER, BevCode.JUNCTION)
MAX_BEV_CODE = max(BevCode)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(yaw, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    """Dense semantic voxel lattice.

    Attributes:
        labels: ``uint8`` array of shape ``(H, W, D)``; read-only.
        voxel_size: edge length in meters.
        origin: world coordinates of the grid's min corner.
    """

    labels: np.ndarray
    voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise InvalidLabelError("label codes must fit in u8")
            labels = labels.astype(np.uint8)
        if labels.size and labels.max() > NUM_CLASSES:
            raise InvalidLabelError(f"label code {int(labels.max())} is not in the class table")
        vs = float(self.voxel_size)
        if not (vs > 0.0 and math.isfinite(vs)):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 3 or not all(math.isfinite(v) for v in origin):
            raise ValueError(f"origin must be three finite floats, got {self.origin}")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def empty(cls, dims, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> "SemanticGrid":
        return cls(np.zeros(tuple(dims), dtype=np.uint8), voxel_size, origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def extent(self) -> np.ndarray:
        """World coordinates of the max corner."""
        return np.asarray(self.origin) + np.asarray(self.dims) * self.voxel_size

    def with_labels(self, labels: np.ndarray) -> "SemanticGrid":
        return SemanticGrid(labels, self.voxel_size, self.origin)

    def count(self, label: int) -> int:
        return int(np.count_nonzero(self.labels == label))

    def __eq__(self, other):
        if not isinstance(other, SemanticGrid):
            return NotImplemented
        return (
            self.voxel_size == other.voxel_size
            and self.origin == other.origin
            and self.labels.shape == other.labels.shape
            and bool(np.array_equal(self.labels, other.labels))
        )

    __hash__ = None

    def __repr__(self):
        return f"SemanticGrid(dims={self.dims}, voxel_size={self.voxel_size}, origin={self.origin})"


@dataclass(frozen=True, eq=False)
class BevMap:
    """Top-down road-structure raster; ``cells[i, j]`` covers world x/y like a grid column."""

    cells: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or min(cells.shape) < 1:
            raise ValueError(f"cells must be a non-empty 2D array, got shape {cells.shape}")
        if cells.size and (cells.min() < 0 or cells.max() > MAX_BEV_CODE):
            raise InvalidLabelError(f"BEV code out of range: {int(cells.max())}")
        cs = float(self.cell_size)
        if not (cs > 0.0 and math.isfinite(cs)):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 2:
            raise ValueError("BEV origin is (x, y)")
        object.__setattr__(self, "cells", _frozen(cells.astype(np.uint8)))
        object.__setattr__(self, "cell_size", cs)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(n) for n in self.cells.shape)

    def road_mask(self) -> np.ndarray:
        return np.isin(self.cells, ROAD_CODES)

    def crop(self, i0: int, j0: int, h: int, w: int) -> "BevMap":
        if i0 < 0 or j0 < 0 or i0 + h > self.dims[0] or j0 + w > self.dims[1]:
            raise ValueError(f"crop ({i0},{j0},{h},{w}) outside BEV of dims {self.dims}")
        return BevMap(
            self.cells[i0 : i0 + h, j0 : j0 + w],
            self.cell_size,
            (self.origin[0] + i0 * self.cell_size, self.origin[1] + j0 * self.cell_size),
        )

    def __eq__(self, other):
        if not isinstance(other, BevMap):
            return NotImplemented
        return (
            self.cell_size == other.cell_size
            and self.origin == other.origin
            and self.cells.shape == other.cells.shape
            and bool(np.array_equal(self.cells, other.cells))
        )

    __hash__ = None


@dataclass(frozen=True)
class Pose:
    """World-frame pose; yaw is kept in (-pi, pi]."""

    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "yaw"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.x, self.y, self.z, self.yaw))

    def relative_to(self, ref: "Pose") -> "Pose":
        """Express this pose in the frame of ``ref`` (x forward, y left)."""
        c, s = math.cos(ref.yaw), math.sin(ref.yaw)
        dx, dy = self.x - ref.x, self.y - ref.y
        return Pose(c * dx + s * dy, -s * dx + c * dy, self.z - ref.z, self.yaw - ref.yaw)

    def compose(self, local: "Pose") -> "Pose":
        """Inverse of :meth:`relative_to`: place ``local`` (given in this frame) in the world."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(
            self.x + c * local.x - s * local.y,
            self.y + s * local.x + c * local.y,
            self.z + local.z,
            self.yaw + local.yaw,
        )


@dataclass(frozen=True, eq=False)
class OverlapMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise ValueError("overlap mask must be 3D")
        object.__setattr__(self, "bits", _frozen(bits))

    @classmethod
    def zeros(cls, dims) -> "OverlapMask":
        return cls(np.zeros(tuple(dims), dtype=bool))

    @classmethod
    def ones(cls, dims) -> "OverlapMask":
        return cls(np.ones(tuple(dims), dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)

    def __eq__(self, other):
        if not isinstance(other, OverlapMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def voxel_to_world(grid: SemanticGrid, idx) -> np.ndarray:
    """Center of voxel ``idx`` in world coordinates."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        raise IndexError(f"voxel index {tuple(idx)} outside grid of dims {grid.dims}")
    return np.asarray(grid.origin) + (idx + 0.5) * grid.voxel_size


def world_to_voxel(grid: SemanticGrid, point) -> tuple[int, int, int]:
    """Index of the voxel containing ``point`` (min faces are inclusive)."""
    q = (np.asarray(point, dtype=float) - np.asarray(grid.origin)) / grid.voxel_size
    idx = np.floor(q).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        raise IndexError(f"point {tuple(point)} lies outside the grid")
    return tuple(int(v) for v in idx)


# --- codecs -----------------------------------------------------------------


class CodecError(ValueError):
    pass


class BadMagicError(CodecError):
    pass


class TruncatedStreamError(CodecError):
    pass


class RunOverrunError(CodecError):
    pass


class InvalidLabelError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


FORMAT_VERSION = 1
_OCC_MAGIC = b"OCC4"
_BEV_MAGIC = b"BEV2"
_OCC_HEADER = struct.Struct("<4sB3Id3d")
_BEV_HEADER = struct.Struct("<4sB2Id2d")
_RUN = np.dtype([("count", "<u4"), ("label", "u1")])
_U32_MAX = 2**32 - 1


def _rle_encode(flat: np.ndarray) -> bytes:
    if flat.size == 0:
        return b""
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    counts = np.diff(np.concatenate((starts, [flat.size])))
    labels = flat[starts]
    if counts.max() > _U32_MAX:
        # split overlong runs; only reachable for > 4 Gi voxel grids
        reps = (counts + _U32_MAX - 1) // _U32_MAX
        labels = np.repeat(labels, reps)
        out = []
        for c, r in zip(counts, reps):
            out.extend([_U32_MAX] * (int(r) - 1) + [int(c) - _U32_MAX * (int(r) - 1)])
        counts = np.asarray(out)
    runs = np.empty(counts.size, dtype=_RUN)
    runs["count"] = counts
    runs["label"] = labels
    return runs.tobytes()


def _rle_decode(payload: bytes, total: int, max_code: int) -> np.ndarray:
    if len(payload) % _RUN.itemsize:
        raise TruncatedStreamError(f"run stream ends mid-record ({len(payload)} bytes)")
    runs = np.frombuffer(payload, dtype=_RUN)
    counts = runs["count"].astype(np.int64)
    if np.any(counts == 0):
        raise CodecError("zero-length run")
    covered = int(counts.sum())
    if covered > total:
        raise RunOverrunError(f"runs cover {covered} cells but the grid holds {total}")
    if covered < total:
        raise TruncatedStreamError(f"runs cover {covered} of {total} cells")
    labels = runs["label"]
    if labels.size and labels.max() > max_code:
        raise InvalidLabelError(f"invalid label code {int(labels.max())}")
    return np.repeat(labels, counts)


def _split_header(data: bytes, header: struct.Struct, magic: bytes):
    if not magic.startswith(data[:4]):
        raise BadMagicError(f"expected magic {magic!r}, got {bytes(data[:4])!r}")
    if len(data) < header.size:
        raise TruncatedStreamError("stream shorter than header")
    fields = header.unpack_from(data)
    if fields[1] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {fields[1]}")
    return fields, data[header.size :]


def encode_grid(grid: SemanticGrid) -> bytes:
    h, w, d = grid.dims
    head = _OCC_HEADER.pack(_OCC_MAGIC, FORMAT_VERSION, h, w, d, grid.voxel_size, *grid.origin)
    return head + _rle_encode(grid.labels.reshape(-1))


def decode_grid(data: bytes) -> SemanticGrid:
    fields, payload = _split_header(bytes(data), _OCC_HEADER, _OCC_MAGIC)
    _, _, h, w, d, vs, ox, oy, oz = fields
    if min(h, w, d) < 1:
        raise CodecError(f"invalid dims {(h, w, d)}")
    flat = _rle_decode(payload, h * w * d, NUM_CLASSES)
    return SemanticGrid(flat.reshape(h, w, d), vs, (ox, oy, oz))


def encode_bev(bev: BevMap) -> bytes:
    h, w = bev.dims
    head = _BEV_HEADER.pack(_BEV_MAGIC, FORMAT_VERSION, h, w, bev.cell_size, *bev.origin)
    return head + _rle_encode(bev.cells.reshape(-1))


def decode_bev(data: bytes) -> BevMap:
    fields, payload = _split_header(bytes(data), _BEV_HEADER, _BEV_MAGIC)
    _, _, h, w, cs, ox, oy = fields
    if min(h, w) < 1:
        raise CodecError(f"invalid dims {(h, w)}")
    flat = _rle_decode(payload, h * w, MAX_BEV_CODE)
    return BevMap(flat.reshape(h, w), cs, (ox, oy))


def save_grid(grid: SemanticGrid, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_grid(grid))


def load_grid(path) -> SemanticGrid:
    with open(path, "rb") as f:
        return decode_grid(f.read())


def save_bev(bev: BevMap, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_bev(bev))


def load_bev(path) -> BevMap:
    with open(path, "rb") as f:
        return decode_bev(f.read())
