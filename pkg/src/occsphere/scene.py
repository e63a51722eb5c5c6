"""Regional scene generation and the expansion / merge algebra for city scenes.

Regions are generated from BEV road rasters by a pluggable generator. A
neighboring region is expanded from an existing one by hard-conditioning the
shared overlap on the existing voxels, and the two are merged so that the
first region's voxels outside the overlap survive untouched.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import BevCode, BevMap, Label, OverlapMask, SemanticGrid

log = logging.getLogger(__name__)

STYLE_PRESETS = {
    "suburban-vegetation": (0.10, 0.55),
    "commercial-buildings": (0.55, 0.10),
    "open-road": (0.05, 0.15),
}


class SceneError(ValueError):
    pass


class OverlapError(SceneError):
    """Mask or offset does not describe the shared band of two regions."""


@dataclass(frozen=True)
class SceneStyle:
    tag: str = "suburban-vegetation"
    building_fraction: float | None = None
    vegetation_fraction: float | None = None

    def __post_init__(self):
        if self.tag not in STYLE_PRESETS:
            raise SceneError(f"unknown style {self.tag!r}; choose from {sorted(STYLE_PRESETS)}")
        b, v = STYLE_PRESETS[self.tag]
        if self.building_fraction is None:
            object.__setattr__(self, "building_fraction", b)
        if self.vegetation_fraction is None:
            object.__setattr__(self, "vegetation_fraction", v)
        for name in ("building_fraction", "vegetation_fraction"):
            f = getattr(self, name)
            if not 0.0 <= f <= 1.0:
                raise SceneError(f"{name} must lie in [0, 1], got {f}")


@dataclass(frozen=True)
class SceneConfig:
    """Target voxel footprint and vertical layout of generated regions.

    ``footprint=None`` accepts any BEV size. The ground layer is ``k = 0``;
    objects stand on ``k >= 1``.
    """

    footprint: tuple[int, int] | None = None
    height: int = 16
    ground_z: float = 0.0
    noise_cell: int = 8
    building_levels: tuple[int, int] = (2, 8)
    tree_levels: tuple[int, int] = (1, 4)

    def ground_top(self, voxel_size: float) -> float:
        return self.ground_z + voxel_size


class RegionGenerator(Protocol):
    def __call__(self, bev: BevMap, style: SceneStyle, seed: int, config: SceneConfig) -> SemanticGrid: ...


def value_noise(shape, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Bilinearly interpolated lattice noise in [0, 1)."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.random((gh, gw))
    y = np.arange(h) / cell
    x = np.arange(w) / cell
    i0 = np.floor(y).astype(int)
    j0 = np.floor(x).astype(int)
    fy = (y - i0)[:, None]
    fx = (x - j0)[None, :]
    a = lattice[i0][:, j0]
    b = lattice[i0][:, j0 + 1]
    c = lattice[i0 + 1][:, j0]
    d = lattice[i0 + 1][:, j0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def procedural_region(bev: BevMap, style: SceneStyle, seed: int, config: SceneConfig) -> SemanticGrid:
    """Seeded procedural stand-in for a learned region sampler.

    Road cells become drivable ground, sidewalk cells sidewalk, everything
    else terrain. Buildings are boxes extruded per noise-lattice block and
    trees are noise blobs; both only stand on empty (non-road) cells.
    """
    if config.footprint is not None and tuple(config.footprint) != bev.dims:
        raise SceneError(f"BEV dims {bev.dims} do not match configured footprint {tuple(config.footprint)}")
    h, w = bev.dims
    depth = config.height
    if depth < 2:
        raise SceneError("need at least two vertical levels")
    rng = np.random.default_rng(seed)
    cell = config.noise_cell
    bnoise = value_noise((h, w), cell, rng)
    vnoise = value_noise((h, w), max(2, cell // 2), rng)
    blocks = rng.integers(config.building_levels[0], config.building_levels[1] + 1, (h // cell + 1, w // cell + 1))
    tree_h = rng.integers(config.tree_levels[0], config.tree_levels[1] + 1, (h, w))

    cells = bev.cells
    road = np.isin(cells, (BevCode.DRIVABLE, BevCode.LANE_DIVIDER, BevCode.JUNCTION))
    free = cells == BevCode.EMPTY
    labels = np.zeros((h, w, depth), dtype=np.uint8)
    ground = np.full((h, w), Label.TERRAIN, dtype=np.uint8)
    ground[road] = Label.DRIVABLE_SURFACE
    ground[cells == BevCode.SIDEWALK] = Label.SIDEWALK
    labels[:, :, 0] = ground

    building = free & (bnoise < style.building_fraction)
    tree = free & ~building & (vnoise < style.vegetation_fraction)
    levels = np.arange(depth)[None, None, :]
    bh = blocks[np.arange(h)[:, None] // cell, np.arange(w)[None, :] // cell]
    labels[(building[:, :, None]) & (levels >= 1) & (levels <= bh[:, :, None])] = Label.BUILDING
    labels[(tree[:, :, None]) & (levels >= 1) & (levels <= tree_h[:, :, None])] = Label.VEGETATION
    return SemanticGrid(labels, bev.cell_size, (bev.origin[0], bev.origin[1], config.ground_z))


def generate_region(bev: BevMap, style: SceneStyle, seed: int, config: SceneConfig = SceneConfig(),
                    generator: RegionGenerator = procedural_region) -> SemanticGrid:
    return generator(bev, style, seed, config)


def mask_partial(s_k: SemanticGrid, o: OverlapMask) -> SemanticGrid:
    """Keep the voxels under the mask, empty the rest."""
    if o.dims != s_k.dims:
        raise SceneError(f"mask dims {o.dims} differ from grid dims {s_k.dims}")
    return s_k.with_labels(np.where(o.bits, s_k.labels, 0).astype(np.uint8))


def voxel_offset(a_origin, b_origin, voxel_size: float) -> tuple[int, ...]:
    """Integer voxel offset of ``b_origin`` relative to ``a_origin``."""
    rel = (np.asarray(b_origin, dtype=float) - np.asarray(a_origin, dtype=float)) / voxel_size
    off = np.rint(rel)
    if np.any(np.abs(rel - off) > 1e-6):
        raise OverlapError(f"origins {a_origin} and {b_origin} are not voxel-aligned")
    return tuple(int(v) for v in off)


def _intersection(dims_a, dims_b, offset):
    """Overlap box of grid b (placed at ``offset`` in a's frame), in a's indices."""
    lo = [max(0, offset[a]) for a in range(3)]
    hi = [min(dims_a[a], offset[a] + dims_b[a]) for a in range(3)]
    return lo, hi


def overlap_mask(s_k: SemanticGrid, bev_next: BevMap) -> OverlapMask:
    """Mask of ``s_k`` voxels whose columns fall inside ``bev_next``'s footprint."""
    off = voxel_offset(s_k.origin[:2], bev_next.origin, s_k.voxel_size)
    bits = np.zeros(s_k.dims, dtype=bool)
    lo, hi = _intersection(s_k.dims, (*bev_next.dims, s_k.dims[2]), (*off, 0))
    if all(hi[a] > lo[a] for a in range(3)):
        bits[lo[0] : hi[0], lo[1] : hi[1], :] = True
    return OverlapMask(bits)


def expand_region(s_k: SemanticGrid, o: OverlapMask, bev_next: BevMap, style: SceneStyle, seed: int,
                  config: SceneConfig = SceneConfig(), generator: RegionGenerator = procedural_region) -> SemanticGrid:
    """Generate the neighbor region, hard-conditioned on ``s_k`` inside the overlap.

    The spatial relation between the regions comes from their world origins;
    ``o`` lives in ``s_k``'s frame and must stay within ``bev_next``'s footprint.
    """
    partial = mask_partial(s_k, o)
    fresh = generator(bev_next, style, seed, config)
    if fresh.voxel_size != s_k.voxel_size:
        raise SceneError("regions must share a voxel size")
    if fresh.dims[2] != s_k.dims[2]:
        raise SceneError(f"height mismatch: {fresh.dims[2]} vs {s_k.dims[2]}")
    if not o.bits.any():
        return fresh
    off = voxel_offset(s_k.origin, fresh.origin, s_k.voxel_size)
    lo, hi = _intersection(s_k.dims, fresh.dims, off)
    inside = np.zeros(s_k.dims, dtype=bool)
    if all(hi[a] > lo[a] for a in range(3)):
        inside[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    if np.any(o.bits & ~inside):
        raise OverlapError("overlap mask extends beyond the next region's footprint")
    idx = np.nonzero(o.bits)
    labels = fresh.labels.copy()
    labels[idx[0] - off[0], idx[1] - off[1], idx[2] - off[2]] = partial.labels[idx]
    return fresh.with_labels(labels)


def merge_regions(s_k: SemanticGrid, s_next: SemanticGrid, o: OverlapMask, offset) -> SemanticGrid:
    """Union of ``s_k`` with its expansion ``s_next`` placed at voxel ``offset``.

    ``s_k`` contributes only outside the mask; ``s_next`` owns its whole
    extent. The merged grid spans the bounding box of both.

    Raises:
        OverlapError: if the mask leaves ``s_k``'s territory, or if ``s_next``
            would land on occupied ``s_k`` voxels that the mask does not cover.
    """
    if o.dims != s_k.dims:
        raise SceneError(f"mask dims {o.dims} differ from grid dims {s_k.dims}")
    if s_next.voxel_size != s_k.voxel_size:
        raise SceneError("regions must share a voxel size")
    offset = tuple(int(v) for v in offset)
    if len(offset) != 3:
        raise SceneError("offset is an (i, j, k) voxel triple")
    lo, hi = _intersection(s_k.dims, s_next.dims, offset)
    inside = np.zeros(s_k.dims, dtype=bool)
    if all(hi[a] > lo[a] for a in range(3)):
        inside[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    if np.any(o.bits & ~inside):
        raise OverlapError(f"offset {offset} is inconsistent with the overlap band: mask reaches outside s_next")
    clobbered = inside & ~o.bits & (s_k.labels != 0)
    if clobbered.any():
        raise OverlapError(
            f"offset {offset} is inconsistent with the overlap band: "
            f"{int(clobbered.sum())} occupied voxels outside the mask would be overwritten"
        )
    base_lo = np.minimum(0, offset)
    base_hi = np.maximum(s_k.dims, np.asarray(offset) + s_next.dims)
    dims = tuple(int(v) for v in base_hi - base_lo)
    out = np.zeros(dims, dtype=np.uint8)
    a = -base_lo
    out[a[0] : a[0] + s_k.dims[0], a[1] : a[1] + s_k.dims[1], a[2] : a[2] + s_k.dims[2]] = np.where(
        o.bits, 0, s_k.labels
    )
    b = a + offset
    out[b[0] : b[0] + s_next.dims[0], b[1] : b[1] + s_next.dims[1], b[2] : b[2] + s_next.dims[2]] = s_next.labels
    origin = tuple(np.asarray(s_k.origin) + base_lo * s_k.voxel_size)
    return SemanticGrid(out, s_k.voxel_size, origin)


# --- city layouts ---------------------------------------------------------------


@dataclass(frozen=True)
class RegionLayout:
    """``rows x cols`` region slots that overlap their neighbors by ``overlap_band`` voxels."""

    slots: tuple[tuple[BevMap, ...], ...]
    overlap_band: int = 16

    def __post_init__(self):
        if not self.slots or not self.slots[0]:
            raise SceneError("layout needs at least one slot")
        ncols = len(self.slots[0])
        if any(len(r) != ncols for r in self.slots):
            raise SceneError("layout rows must have equal length")
        first = self.slots[0][0]
        h, w = first.dims
        b = self.overlap_band
        if b < 0 or (len(self.slots) > 1 and b >= h) or (ncols > 1 and b >= w):
            raise SceneError(f"overlap band {b} incompatible with region dims {(h, w)}")
        for r, row in enumerate(self.slots):
            for c, bev in enumerate(row):
                if bev.dims != (h, w) or bev.cell_size != first.cell_size:
                    raise SceneError(f"slot {(r, c)}: all regions must share dims and cell size")
                want = (first.origin[0] + r * (h - b) * first.cell_size, first.origin[1] + c * (w - b) * first.cell_size)
                if voxel_offset(want, bev.origin, first.cell_size) != (0, 0):
                    raise SceneError(f"slot {(r, c)}: origin {bev.origin} inconsistent with slot index")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.slots), len(self.slots[0])

    @classmethod
    def from_city_bev(cls, bev: BevMap, rows: int, cols: int, region: tuple[int, int], overlap_band: int) -> "RegionLayout":
        h, w = region
        b = overlap_band
        need = (rows * (h - b) + b, cols * (w - b) + b)
        if bev.dims[0] < need[0] or bev.dims[1] < need[1]:
            raise SceneError(f"city BEV {bev.dims} too small for layout needing {need}")
        return cls(
            tuple(tuple(bev.crop(r * (h - b), c * (w - b), h, w) for c in range(cols)) for r in range(rows)),
            overlap_band,
        )


def road_grid_bev(dims, cell_size: float, origin=(0.0, 0.0), rows_at=(), cols_at=(),
                  road_width: int = 14, sidewalk: int = 2) -> BevMap:
    """Axis-aligned road network with a center divider, junctions and sidewalks.

    ``rows_at`` are cell indices (along the first axis) of east-west road
    centerlines; ``cols_at`` likewise for north-south roads.
    """
    h, w = dims
    cells = np.zeros((h, w), dtype=np.uint8)
    half = road_width // 2
    horiz = np.zeros((h, w), dtype=bool)
    vert = np.zeros((h, w), dtype=bool)
    for r in rows_at:
        lo, hi = max(0, r - half - sidewalk), min(h, r + half + sidewalk)
        cells[lo:hi, :][cells[lo:hi, :] == BevCode.EMPTY] = BevCode.SIDEWALK
    for c in cols_at:
        lo, hi = max(0, c - half - sidewalk), min(w, c + half + sidewalk)
        cells[:, lo:hi][cells[:, lo:hi] == BevCode.EMPTY] = BevCode.SIDEWALK
    for r in rows_at:
        horiz[max(0, r - half) : min(h, r + half), :] = True
    for c in cols_at:
        vert[:, max(0, c - half) : min(w, c + half)] = True
    cells[horiz | vert] = BevCode.DRIVABLE
    for r in rows_at:
        if 0 <= r < h:
            cells[r, :][horiz[r, :] & ~vert[r, :]] = BevCode.LANE_DIVIDER
    for c in cols_at:
        if 0 <= c < w:
            cells[:, c][vert[:, c] & ~horiz[:, c]] = BevCode.LANE_DIVIDER
    cells[horiz & vert] = BevCode.JUNCTION
    return BevMap(cells, cell_size, origin)


def slot_seed(seed: int, r: int, c: int):
    """Per-slot generator seed; the first slot uses ``seed`` itself."""
    return int(seed) if r == c == 0 else [int(seed), r, c]


def build_city(layout: RegionLayout, style: SceneStyle, seed: int, config: SceneConfig = SceneConfig(),
               generator: RegionGenerator = procedural_region) -> SemanticGrid:
    """Fold generate/expand/merge over the slots in row-major order."""
    rows, cols = layout.shape
    city = None
    covered = []  # (i0, j0, h, w) boxes in city frame of generated slots
    for r in range(rows):
        for c in range(cols):
            bev = layout.slots[r][c]
            try:
                if city is None:
                    city = generate_region(bev, style, slot_seed(seed, r, c), config, generator)
                    covered.append((0, 0, *bev.dims))
                    continue
                off = voxel_offset(city.origin[:2], bev.origin, city.voxel_size)
                mask = np.zeros(city.dims, dtype=bool)
                for i0, j0, h, w in covered:
                    lo_i, hi_i = max(i0, off[0]), min(i0 + h, off[0] + bev.dims[0])
                    lo_j, hi_j = max(j0, off[1]), min(j0 + w, off[1] + bev.dims[1])
                    if hi_i > lo_i and hi_j > lo_j:
                        mask[lo_i:hi_i, lo_j:hi_j, :] = True
                o = OverlapMask(mask)
                nxt = expand_region(city, o, bev, style, slot_seed(seed, r, c), config, generator)
                city = merge_regions(city, nxt, o, (*off, 0))
                shift = (min(0, off[0]), min(0, off[1]))
                covered = [(i0 - shift[0], j0 - shift[1], h, w) for i0, j0, h, w in covered]
                covered.append((off[0] - shift[0], off[1] - shift[1], *bev.dims))
            except SceneError as exc:
                raise SceneError(f"slot {(r, c)}: {exc}") from exc
    log.debug("built city %s from %dx%d slots", city.dims, rows, cols)
    return city


def load_layout(path) -> tuple[RegionLayout, SceneStyle, SceneConfig, int | None]:
    """Read a city layout file.

    Keys (section ``[layout]``)::

        rows, cols          slot counts
        region = 64, 64     region footprint in voxels
        height = 16         vertical levels
        voxel_size = 0.5
        overlap_band = 16
        bev = city.bev      optional global BEV; cropped per slot
        roads_x = 32, 96    else: road centerline cell rows of a procedural grid
        roads_y = 40
        road_width = 14
        style = suburban-vegetation
        seed = 0

    Relative ``bev`` paths resolve against the layout file's directory.
    """
    import os

    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(path)
    s = cp["layout"]
    rows, cols = int(s.get("rows", 1)), int(s.get("cols", 1))
    region = tuple(int(v) for v in s.get("region", "64, 64").split(","))
    band = int(s.get("overlap_band", 16))
    vs = float(s.get("voxel_size", 0.5))
    config = SceneConfig(footprint=region, height=int(s.get("height", 16)))
    if "bev" in s:
        from .core import load_bev

        bev_path = s["bev"]
        if not os.path.isabs(bev_path):
            bev_path = os.path.join(os.path.dirname(os.path.abspath(path)), bev_path)
        city_bev = load_bev(bev_path)
    else:
        total = (rows * (region[0] - band) + band, cols * (region[1] - band) + band)
        ints = lambda key: tuple(int(v) for v in s.get(key, "").split(",") if v.strip())
        city_bev = road_grid_bev(total, vs, rows_at=ints("roads_x"), cols_at=ints("roads_y"),
                                 road_width=int(s.get("road_width", 14)))
    layout = RegionLayout.from_city_bev(city_bev, rows, cols, region, band)
    style = SceneStyle(s.get("style", "suburban-vegetation"))
    seed = int(s["seed"]) if "seed" in s else None
    return layout, style, config, seed


def city_bev_of(layout: RegionLayout) -> BevMap:
    """Reassemble the city-wide BEV covered by a layout."""
    rows, cols = layout.shape
    first = layout.slots[0][0]
    h, w = first.dims
    b = layout.overlap_band
    cells = np.zeros((rows * (h - b) + b, cols * (w - b) + b), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            cells[r * (h - b) : r * (h - b) + h, c * (w - b) : c * (w - b) + w] = layout.slots[r][c].cells
    return BevMap(cells, first.cell_size, first.origin)
