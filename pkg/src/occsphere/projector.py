"""Pinhole cameras that ray-cast a voxel world into semantic + depth images.

Camera frame is x right, y down, z forward. Ego frame is x forward, y left,
z up. Every pixel casts one ray through its center; the traversal itself
lives in :mod:`occsphere.kernels`.
"""
from __future__ import annotations

import configparser
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import Pose, SemanticGrid

DEFAULT_IMAGE_SIZE = (224, 400)  # (height, width)

# name, yaw in degrees (ego frame, counter-clockwise)
DEFAULT_VIEWS = (
    ("front", 0.0),
    ("front-left", 55.0),
    ("front-right", -55.0),
    ("back", 180.0),
    ("back-left", 110.0),
    ("back-right", -110.0),
)


class CameraError(ValueError):
    pass


def _rz(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def mount_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Camera-from-body rotation for a camera looking along ``yaw``, tilted down by ``pitch``."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Intrinsics plus a rigid camera-from-world (or camera-from-ego) transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise CameraError("image dims must be positive")
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise CameraError("extrinsics must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise CameraError("rotation is not orthonormal")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_fov(cls, width: int, height: int, hfov: float, rotation=None, translation=None):
        fx = (width / 2.0) / math.tan(hfov / 2.0)
        return cls(
            fx, fx, width / 2.0, height / 2.0, width, height,
            np.eye(3) if rotation is None else rotation,
            np.zeros(3) if translation is None else translation,
        )

    @classmethod
    def at_pose(cls, intr: "CameraModel", position, yaw: float, pitch: float = 0.0):
        """Camera with ``intr``'s intrinsics placed at ``position`` looking along ``yaw``."""
        R = mount_rotation(yaw, pitch)
        return intr.with_extrinsics(R, -R @ np.asarray(position, dtype=float))

    def with_extrinsics(self, rotation, translation) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, rotation, translation)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions (world frame) for all pixels, row-major."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        x = (u.reshape(-1) + 0.5 - self.cx) / self.fx
        y = (v.reshape(-1) + 0.5 - self.cy) / self.fy
        cam = np.stack([x, y, np.ones_like(x)], axis=1)
        d = cam @ self.rotation  # rows of R^T applied: R^T @ cam_i
        d /= np.sqrt(np.sum(d * d, axis=1))[:, None]
        o = np.broadcast_to(self.center, d.shape)
        return np.ascontiguousarray(o), np.ascontiguousarray(d)

    def project(self, points) -> np.ndarray:
        """World points to ``(u, v, z_cam)`` columns."""
        p = np.atleast_2d(np.asarray(points, dtype=float)) @ self.rotation.T + self.translation
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy, z], axis=1)


@dataclass(frozen=True)
class CameraRig:
    """Ordered, uniquely named cameras whose extrinsics are camera-from-ego."""

    views: tuple[tuple[str, CameraModel], ...]

    def __post_init__(self):
        views = tuple((str(n), c) for n, c in self.views)
        names = [n for n, _ in views]
        if len(set(names)) != len(names):
            raise CameraError(f"duplicate view names in rig: {names}")
        object.__setattr__(self, "views", views)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.views]

    def __getitem__(self, name: str) -> CameraModel:
        for n, c in self.views:
            if n == name:
                return c
        raise KeyError(name)

    def __len__(self):
        return len(self.views)


def default_rig(height: int = DEFAULT_IMAGE_SIZE[0], width: int = DEFAULT_IMAGE_SIZE[1],
                hfov_deg: float = 70.0, mount_height: float = 1.6) -> CameraRig:
    """Six views sharing one mount point, so rotating the ego by pi swaps front and back."""
    intr = CameraModel.from_fov(width, height, math.radians(hfov_deg))
    return CameraRig(
        tuple(
            (name, CameraModel.at_pose(intr, (0.0, 0.0, mount_height), math.radians(yaw)))
            for name, yaw in DEFAULT_VIEWS
        )
    )


def load_rig(path) -> CameraRig:
    """Read a rig file.

    Layout::

        [rig]
        width = 400
        height = 224
        hfov_deg = 70

        [view front]
        mount = 0, 0, 1.6
        yaw_deg = 0
        pitch_deg = 0
        ; optional explicit intrinsics: fx, fy, cx, cy

    A file with only ``[rig] preset = default`` gives :func:`default_rig`.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(path)
    return rig_from_config(cp)


def rig_from_config(cp: configparser.ConfigParser) -> CameraRig:
    base = cp["rig"] if cp.has_section("rig") else {}
    width = int(base.get("width", DEFAULT_IMAGE_SIZE[1]))
    height = int(base.get("height", DEFAULT_IMAGE_SIZE[0]))
    hfov = float(base.get("hfov_deg", 70.0))
    views = []
    for sec in cp.sections():
        if not sec.startswith("view "):
            continue
        s = cp[sec]
        intr = CameraModel.from_fov(width, height, math.radians(float(s.get("hfov_deg", hfov))))
        if "fx" in s:
            intr = CameraModel(
                float(s["fx"]), float(s.get("fy", s["fx"])),
                float(s.get("cx", width / 2)), float(s.get("cy", height / 2)), width, height,
            )
        mount = [float(v) for v in s.get("mount", "0, 0, 1.6").split(",")]
        cam = CameraModel.at_pose(
            intr, mount, math.radians(float(s.get("yaw_deg", 0))), math.radians(float(s.get("pitch_deg", 0)))
        )
        views.append((sec[5:].strip(), cam))
    if not views:
        return default_rig(height, width, hfov, float(base.get("mount_height", 1.6)))
    return CameraRig(tuple(views))


@dataclass(frozen=True, eq=False)
class SemanticImage:
    labels: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.float32)
        if labels.shape != depth.shape or labels.ndim != 2:
            raise ValueError("labels and depth must be congruent 2D rasters")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "depth", depth)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, SemanticImage):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(self.depth, other.depth)

    __hash__ = None


def _grid_of(world) -> SemanticGrid:
    return world if isinstance(world, SemanticGrid) else world.grid


def cast_ray(grid: SemanticGrid, origin, direction):
    """First occupied voxel along a ray.

    Returns:
        ``(label, depth)`` with depth the distance to the voxel's entry point,
        or ``None`` on a miss. A ray starting inside an occupied voxel hits
        it at depth 0.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(o)):
        raise ValueError(f"ray origin must be finite, got {o}")
    norm = math.sqrt(float(np.sum(d * d)))
    if not norm > 0 or not math.isfinite(norm):
        raise ValueError("ray direction must be finite and non-zero")
    lab, depth = kernels.cast_rays(grid.labels, grid.origin, grid.voxel_size, o[None], (d / norm)[None])
    if lab[0] == 0:
        return None
    return int(lab[0]), float(depth[0])


def render_view(world, cam: CameraModel) -> SemanticImage:
    grid = _grid_of(world)
    o, d = cam.pixel_rays()
    lab, depth = kernels.cast_rays(grid.labels, grid.origin, grid.voxel_size, o, d)
    shape = (cam.height, cam.width)
    return SemanticImage(lab.reshape(shape), depth.reshape(shape))


def camera_in_world(cam: CameraModel, ego_pose: Pose) -> CameraModel:
    """Compose camera-from-ego with ego-from-world."""
    R_we = _rz(ego_pose.yaw)
    p = np.array([ego_pose.x, ego_pose.y, ego_pose.z])
    R_ew = R_we.T
    t_ew = -R_ew @ p
    return cam.with_extrinsics(cam.rotation @ R_ew, cam.rotation @ t_ew + cam.translation)


def render_rig(world, rig: CameraRig, ego_pose: Pose, views=None, workers: int = 1) -> dict[str, SemanticImage]:
    """Render every (or the requested) view; keys follow rig order."""
    if not ego_pose.is_finite():
        raise ValueError("ego pose must be finite")
    names = rig.names if views is None else list(views)
    unknown = [n for n in names if n not in rig.names]
    if unknown:
        raise KeyError(f"unknown view(s): {unknown}")
    names = [n for n in rig.names if n in names]
    cams = [camera_in_world(rig[n], ego_pose) for n in names]
    if workers > 1 and len(cams) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            images = list(ex.map(lambda c: render_view(world, c), cams))
    else:
        images = [render_view(world, c) for c in cams]
    return dict(zip(names, images))


# --- raster files -----------------------------------------------------------------


def write_image(img: SemanticImage, stem) -> tuple[str, str]:
    """Write ``<stem>.pgm`` (labels) and ``<stem>.dep`` (float32 LE depth)."""
    stem = os.fspath(stem)
    h, w = img.dims
    pgm, dep = stem + ".pgm", stem + ".dep"
    with open(pgm, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.labels.tobytes())
    with open(dep, "wb") as f:
        f.write(img.depth.astype("<f4").tobytes())
    return pgm, dep


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) > 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w).copy()


def read_image(stem) -> SemanticImage:
    stem = os.fspath(stem)
    labels = read_pgm(stem + ".pgm")
    depth = np.fromfile(stem + ".dep", dtype="<f4").reshape(labels.shape)
    return SemanticImage(labels, depth)
