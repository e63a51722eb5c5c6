"""Stamps posed actor voxels into a static scene to form one tick's world."""
from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .actors import ActorAsset, ActorInstance
from .core import FOREGROUND, Label, SemanticGrid, encode_grid


class CompositionError(ValueError):
    pass


class UnknownAssetError(CompositionError):
    def __init__(self, instance_id: int, asset_id: str):
        super().__init__(f"instance {instance_id} references unknown asset {asset_id!r}")
        self.instance_id = instance_id
        self.asset_id = asset_id


class OutsideGridError(CompositionError):
    pass


@dataclass(frozen=True)
class StampReport:
    """What one stamp displaced.

    ``static_conflicts`` lists voxels where the actor overwrote non-empty
    static scene content; ``actor_conflicts`` lists ``(voxel, owner_id)``
    pairs the actor lost to an earlier-stamped actor; ``clipped`` counts
    actor voxels that fell outside the grid.
    """

    instance_id: int
    static_conflicts: tuple[tuple[int, int, int], ...] = ()
    actor_conflicts: tuple[tuple[tuple[int, int, int], int], ...] = ()
    clipped: int = 0


def posed_voxel_indices(grid: SemanticGrid, instance: ActorInstance, asset: ActorAsset) -> tuple[np.ndarray, int]:
    """World voxel indices (n, 3) covered by a posed asset, plus the clipped count.

    Each non-empty asset voxel center is rotated by the pose yaw about the
    local origin, translated by the pose position and assigned to the world
    voxel containing it. Indices come back unique and sorted row-major.
    """
    p = instance.pose
    if not p.is_finite():
        raise CompositionError(f"instance {instance.instance_id} has a non-finite pose")
    av = asset.voxels
    idx = np.argwhere(av.labels != 0)
    centers = np.asarray(av.origin) + (idx + 0.5) * av.voxel_size
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    wx = c * centers[:, 0] - s * centers[:, 1] + p.x
    wy = s * centers[:, 0] + c * centers[:, 1] + p.y
    wz = centers[:, 2] + p.z
    world = np.stack([wx, wy, wz], axis=1)
    vox = np.floor((world - np.asarray(grid.origin)) / grid.voxel_size).astype(np.int64)
    inside = np.all((vox >= 0) & (vox < np.asarray(grid.dims)), axis=1)
    vox = np.unique(vox[inside], axis=0)
    clipped = int(np.count_nonzero(~inside))
    if idx.shape[0] and not vox.shape[0]:
        raise OutsideGridError(f"instance {instance.instance_id} lies entirely outside the grid")
    return vox.reshape(-1, 3), clipped


def stamp_actor(grid: SemanticGrid, instance: ActorInstance, asset: ActorAsset,
                owners: Mapping[tuple[int, int, int], int] | None = None):
    """Stamp one actor; returns ``(voxels written (n, 3), label, StampReport)``.

    ``owners`` maps voxels already claimed by earlier actors to their
    instance ids; those voxels are not written and show up as actor
    conflicts. The grid itself is not modified.
    """
    owners = owners or {}
    vox, clipped = posed_voxel_indices(grid, instance, asset)
    keep = np.ones(len(vox), dtype=bool)
    actor_conf = []
    if owners:
        for n, v in enumerate(map(tuple, vox.tolist())):
            if v in owners:
                keep[n] = False
                actor_conf.append((v, owners[v]))
    written = vox[keep]
    hit = grid.labels[written[:, 0], written[:, 1], written[:, 2]] != 0
    static_conf = tuple(map(tuple, written[hit].tolist()))
    report = StampReport(instance.instance_id, static_conf, tuple(actor_conf), clipped)
    return written, asset.label, report


@dataclass(frozen=True, eq=False)
class WorldState:
    """One composed tick.

    ``actors`` holds the environment actors in ascending instance id order;
    ``instance_map`` maps voxel index to owning instance id.
    """

    tick: int
    time: float
    grid: SemanticGrid
    static_ref: str
    actors: tuple[ActorInstance, ...] = ()
    instance_map: dict = field(default_factory=dict)
    footprints: dict = field(default_factory=dict)
    classes: dict = field(default_factory=dict)
    reports: tuple[StampReport, ...] = ()

    @property
    def static_conflicts(self):
        return [(r.instance_id, v) for r in self.reports for v in r.static_conflicts]

    @property
    def actor_conflicts(self):
        return [(r.instance_id, v, o) for r in self.reports for v, o in r.actor_conflicts]

    def actor(self, instance_id: int) -> ActorInstance:
        for a in self.actors:
            if a.instance_id == instance_id:
                return a
        raise KeyError(instance_id)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            self.tick == other.tick
            and self.time == other.time
            and self.static_ref == other.static_ref
            and self.actors == other.actors
            and self.instance_map == other.instance_map
            and self.footprints == other.footprints
            and self.classes == other.classes
            and self.reports == other.reports
            and self.grid == other.grid
        )

    __hash__ = None


def compose_world(static: SemanticGrid, actors: Iterable[ActorInstance], bank: Mapping[str, ActorAsset],
                  tick: int = 0, time: float = 0.0, static_ref: str = "") -> WorldState:
    """Stamp every actor into a copy of ``static`` in ascending instance id order.

    On actor-vs-actor overlap the earlier (smaller id) actor keeps the voxel.
    """
    ordered = sorted(actors, key=lambda a: a.instance_id)
    ids = [a.instance_id for a in ordered]
    if len(set(ids)) != len(ids):
        raise CompositionError(f"duplicate instance ids in {ids}")
    labels = static.labels.copy()
    owners: dict[tuple[int, int, int], int] = {}
    footprints, classes, reports = {}, {}, []
    for inst in ordered:
        asset = bank.get(inst.asset_id)
        if asset is None:
            raise UnknownAssetError(inst.instance_id, inst.asset_id)
        written, label, report = stamp_actor(static, inst, asset, owners)
        labels[written[:, 0], written[:, 1], written[:, 2]] = int(label)
        for v in map(tuple, written.tolist()):
            owners[v] = inst.instance_id
        footprints[inst.instance_id] = asset.footprint
        classes[inst.instance_id] = asset.label
        reports.append(report)
    return WorldState(int(tick), float(time), static.with_labels(labels), static_ref, tuple(ordered),
                      owners, footprints, classes, tuple(reports))


def world_hash(grid: SemanticGrid) -> str:
    """64-bit hex digest of the grid's encoded byte stream."""
    return hashlib.blake2b(encode_grid(grid), digest_size=8).hexdigest()


def check_instance_map(world: WorldState) -> bool:
    """Every mapped voxel carries its owner's foreground class."""
    for (i, j, k), iid in world.instance_map.items():
        lab = Label(int(world.grid.labels[i, j, k]))
        if lab not in FOREGROUND or lab != world.classes[iid]:
            return False
    return True
