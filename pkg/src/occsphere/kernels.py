"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked at import time: numba when it is importable and the
environment variable ``OCCSPHERE_DISABLE_JIT`` is unset (or ``0``), numpy
otherwise. Both backends evaluate the same floating-point expressions in the
same order, so their outputs are bit-identical.

Ray/voxel conventions shared by both paths:

* plane ``m`` along an axis sits at ``origin + m * voxel_size``; every crossing
  parameter is computed as ``(plane - o) / d`` and never accumulated;
* a ray hits a voxel only if its intersection with the closed box has positive
  length, so edge and corner grazes do not count;
* when a ray runs exactly inside a voxel face (``d == 0`` on that axis) it is
  attributed to the voxel with the smaller index.
"""
from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    # render_rig may call kernels from several Python threads; workqueue is not thread-safe
    if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

JIT_DISABLED = os.environ.get("OCCSPHERE_DISABLE_JIT", "").strip() not in ("", "0")

_backend = "numba" if HAVE_NUMBA and not JIT_DISABLED else "numpy"


def backend() -> str:
    return _backend


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if HAVE_NUMBA else ("numpy",)


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend (tests and benchmarks)."""
    global _backend
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    prev, _backend = _backend, name
    try:
        yield
    finally:
        _backend = prev


def set_num_threads(n: int | None) -> None:
    """Cap the kernel thread pool; ``None`` leaves it unchanged."""
    if HAVE_NUMBA and n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# --- numba path ---------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _start_index(g, n, vs, o, d, t0):
        # voxel along one axis that the ray occupies just after t0
        q = (o + t0 * d - g) / vs
        m = int(math.floor(q))
        if m < 0:
            m = 0
        if m > n - 1:
            m = n - 1
        if d > 0.0:
            while m > 0 and (g + m * vs - o) / d > t0:
                m -= 1
            while m < n - 1 and (g + (m + 1) * vs - o) / d <= t0:
                m += 1
        else:
            while m < n - 1 and (g + (m + 1) * vs - o) / d > t0:
                m += 1
            while m > 0 and (g + m * vs - o) / d <= t0:
                m -= 1
        return m

    @njit(cache=True)
    def _cast_one(labels, g0, g1, g2, vs, o0, o1, o2, d0, d1, d2):
        n0, n1, n2 = labels.shape
        inf = np.inf
        t0 = 0.0
        t1 = inf
        i = j = k = 0
        # axis 0
        if d0 == 0.0:
            q = (o0 - g0) / vs
            if not (q > 0.0 and q <= n0):
                return 0, inf
            i = int(math.ceil(q)) - 1
        else:
            ta = (g0 - o0) / d0
            tb = (g0 + n0 * vs - o0) / d0
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
        # axis 1
        if d1 == 0.0:
            q = (o1 - g1) / vs
            if not (q > 0.0 and q <= n1):
                return 0, inf
            j = int(math.ceil(q)) - 1
        else:
            ta = (g1 - o1) / d1
            tb = (g1 + n1 * vs - o1) / d1
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
        # axis 2
        if d2 == 0.0:
            q = (o2 - g2) / vs
            if not (q > 0.0 and q <= n2):
                return 0, inf
            k = int(math.ceil(q)) - 1
        else:
            ta = (g2 - o2) / d2
            tb = (g2 + n2 * vs - o2) / d2
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
        if not t0 < t1:
            return 0, inf
        if d0 != 0.0:
            i = _start_index(g0, n0, vs, o0, d0, t0)
        if d1 != 0.0:
            j = _start_index(g1, n1, vs, o1, d1, t0)
        if d2 != 0.0:
            k = _start_index(g2, n2, vs, o2, d2, t0)
        s0 = 1 if d0 > 0.0 else -1
        s1 = 1 if d1 > 0.0 else -1
        s2 = 1 if d2 > 0.0 else -1
        t = t0
        while True:
            lab = labels[i, j, k]
            if lab != 0:
                return lab, t
            tn0 = inf
            tn1 = inf
            tn2 = inf
            if d0 != 0.0:
                tn0 = (g0 + (i + (1 if s0 > 0 else 0)) * vs - o0) / d0
            if d1 != 0.0:
                tn1 = (g1 + (j + (1 if s1 > 0 else 0)) * vs - o1) / d1
            if d2 != 0.0:
                tn2 = (g2 + (k + (1 if s2 > 0 else 0)) * vs - o2) / d2
            tmin = min(tn0, min(tn1, tn2))
            if tn0 == tmin:
                i += s0
            if tn1 == tmin:
                j += s1
            if tn2 == tmin:
                k += s2
            if i < 0 or i >= n0 or j < 0 or j >= n1 or k < 0 or k >= n2:
                return 0, inf
            t = tmin

    @njit(cache=True, parallel=True)
    def _cast_rays_numba(labels, origin, vs, ray_o, ray_d, out_lab, out_depth):
        g0, g1, g2 = origin[0], origin[1], origin[2]
        for r in prange(ray_o.shape[0]):
            lab, t = _cast_one(
                labels, g0, g1, g2, vs,
                ray_o[r, 0], ray_o[r, 1], ray_o[r, 2],
                ray_d[r, 0], ray_d[r, 1], ray_d[r, 2],
            )
            out_lab[r] = lab
            out_depth[r] = t


# --- numpy path ---------------------------------------------------------------


def _start_index_np(g, n, vs, o, d, t0):
    q = (o + t0 * d - g) / vs
    m = np.clip(np.floor(q), 0, n - 1).astype(np.int64)
    pos = d > 0.0
    neg = ~pos
    while True:
        fix = pos & (m > 0) & ((g + m * vs - o) / d > t0)
        if not fix.any():
            break
        m[fix] -= 1
    while True:
        fix = pos & (m < n - 1) & ((g + (m + 1) * vs - o) / d <= t0)
        if not fix.any():
            break
        m[fix] += 1
    while True:
        fix = neg & (m < n - 1) & ((g + (m + 1) * vs - o) / d > t0)
        if not fix.any():
            break
        m[fix] += 1
    while True:
        fix = neg & (m > 0) & ((g + m * vs - o) / d <= t0)
        if not fix.any():
            break
        m[fix] -= 1
    return m


def _cast_rays_numpy(labels, origin, vs, ray_o, ray_d):
    nr = ray_o.shape[0]
    dims = labels.shape
    out_lab = np.zeros(nr, dtype=np.uint8)
    out_depth = np.full(nr, np.inf)
    t0 = np.zeros(nr)
    t1 = np.full(nr, np.inf)
    alive = np.ones(nr, dtype=bool)
    idx = np.zeros((nr, 3), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            g, n = origin[a], dims[a]
            o, d = ray_o[:, a], ray_d[:, a]
            par = d == 0.0
            q = (o - g) / vs
            alive &= ~par | ((q > 0.0) & (q <= n))
            idx[par, a] = np.ceil(q[par]).astype(np.int64) - 1
            ta = (g - o) / d
            tb = (g + n * vs - o) / d
            t0 = np.where(par, t0, np.maximum(t0, np.minimum(ta, tb)))
            t1 = np.where(par, t1, np.minimum(t1, np.maximum(ta, tb)))
        alive &= t0 < t1
        rays = np.flatnonzero(alive)
        o = ray_o[rays]
        d = ray_d[rays]
        t = t0[rays]
        idx = idx[rays]
        for a in range(3):
            nz = d[:, a] != 0.0
            if nz.any():
                idx[nz, a] = _start_index_np(
                    origin[a], dims[a], vs, o[nz, a], d[nz, a], t[nz]
                )
        step = np.where(d > 0.0, 1, -1)
        ahead = (d > 0.0).astype(np.int64)
        while rays.size:
            lab = labels[idx[:, 0], idx[:, 1], idx[:, 2]]
            hit = lab != 0
            out_lab[rays[hit]] = lab[hit]
            out_depth[rays[hit]] = t[hit]
            keep = ~hit
            rays, o, d, t, idx, step, ahead = (
                rays[keep], o[keep], d[keep], t[keep], idx[keep], step[keep], ahead[keep]
            )
            if not rays.size:
                break
            tn = np.where(d != 0.0, (origin + (idx + ahead) * vs - o) / d, np.inf)
            tmin = tn.min(axis=1)
            idx = idx + np.where(tn == tmin[:, None], step, 0)
            inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
            t = tmin
            rays, o, d, t, idx, step, ahead = (
                rays[inside], o[inside], d[inside], t[inside], idx[inside], step[inside], ahead[inside]
            )
    return out_lab, out_depth


def cast_rays(labels: np.ndarray, origin, voxel_size: float, ray_o: np.ndarray, ray_d: np.ndarray):
    """First-hit label and entry distance for a batch of rays.

    Args:
        labels: ``(H, W, D)`` uint8 label volume.
        origin: world min corner of the volume.
        voxel_size: voxel edge length.
        ray_o: ``(N, 3)`` ray origins.
        ray_d: ``(N, 3)`` unit ray directions.

    Returns:
        ``(labels, depth)`` arrays of length N; misses are ``(0, inf)``.
    """
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    origin = np.asarray(origin, dtype=np.float64)
    ray_o = np.ascontiguousarray(ray_o, dtype=np.float64).reshape(-1, 3)
    ray_d = np.ascontiguousarray(ray_d, dtype=np.float64).reshape(-1, 3)
    vs = float(voxel_size)
    if _backend == "numba":
        out_lab = np.zeros(ray_o.shape[0], dtype=np.uint8)
        out_depth = np.empty(ray_o.shape[0])
        _cast_rays_numba(labels, origin, vs, ray_o, ray_d, out_lab, out_depth)
        return out_lab, out_depth
    return _cast_rays_numpy(labels, origin, vs, ray_o, ray_d)
