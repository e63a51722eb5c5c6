"""Planar rectangle and polyline helpers."""
from __future__ import annotations

import math

import numpy as np


def rect_corners(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners (4, 2) of an oriented rectangle, counter-clockwise from front-left."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([x, y])


def _axes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = []
    for poly in (a, b):
        for i in range(2):
            e = poly[i + 1] - poly[i]
            out.append((-e[1], e[0]))
    return np.asarray(out)


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Closed separating-axis test; touching rectangles overlap."""
    for n in _axes(a, b):
        pa, pb = a @ n, b @ n
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def time_to_contact(a: np.ndarray, va, b: np.ndarray, vb) -> float:
    """Earliest ``t >= 0`` at which two rectangles moving at constant velocity touch.

    Returns 0 if they already overlap and ``inf`` if they never will.
    """
    rel = np.asarray(vb, dtype=float) - np.asarray(va, dtype=float)
    t_in, t_out = -math.inf, math.inf
    for n in _axes(a, b):
        pa, pb = a @ n, b @ n
        amin, amax, bmin, bmax = pa.min(), pa.max(), pb.min(), pb.max()
        rate = float(rel @ n)
        if rate == 0.0:
            if bmax < amin or amax < bmin:
                return math.inf
            continue
        t1 = (amin - bmax) / rate
        t2 = (amax - bmin) / rate
        t_in = max(t_in, min(t1, t2))
        t_out = min(t_out, max(t1, t2))
        if t_in > t_out:
            return math.inf
    if t_out < 0.0:
        return math.inf
    return max(t_in, 0.0)


class Polyline:
    """2D polyline with arc-length parameterization."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("a polyline needs at least two points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("polyline has repeated points")
        self.points = pts
        self.seg_len = seg_len
        self.cum = np.concatenate(([0.0], np.cumsum(seg_len)))

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def project(self, p) -> tuple[float, float]:
        """Arc length of the closest point and signed lateral offset (left positive)."""
        p = np.asarray(p, dtype=float)
        a = self.points[:-1]
        d = np.diff(self.points, axis=0)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / self.seg_len**2, 0.0, 1.0)
        closest = a + t[:, None] * d
        dist = np.hypot(*(p - closest).T)
        i = int(np.argmin(dist))
        cross = d[i, 0] * (p[1] - a[i, 1]) - d[i, 1] * (p[0] - a[i, 0])
        return float(self.cum[i] + t[i] * self.seg_len[i]), float(math.copysign(dist[i], cross))

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length ``s``; extrapolates linearly past either end."""
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1))
        d = self.points[i + 1] - self.points[i]
        return self.points[i] + d * ((s - self.cum[i]) / self.seg_len[i])

    def heading_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1))
        d = self.points[i + 1] - self.points[i]
        return math.atan2(d[1], d[0])
