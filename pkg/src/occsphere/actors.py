"""Actor bank: voxelized foreground assets with captions and stable IDs."""
from __future__ import annotations

import os
import re
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from .core import FOREGROUND, Label, Pose, SemanticGrid, load_grid, save_grid

MANIFEST = "manifest.tsv"
_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

# behavioral hint: nominal cruising speed per class, m/s
DEFAULT_SPEED = {
    Label.CAR: 8.0,
    Label.BUS: 7.0,
    Label.TRUCK: 7.0,
    Label.TRAILER: 7.0,
    Label.CONSTRUCTION_VEHICLE: 5.0,
    Label.MOTORCYCLE: 8.0,
    Label.BICYCLE: 4.0,
    Label.PEDESTRIAN: 1.4,
}


class BankError(ValueError):
    pass


class MissingAssetError(BankError):
    def __init__(self, asset_id: str, path: str):
        super().__init__(f"asset {asset_id!r}: file {path} not found")
        self.asset_id = asset_id


def tokens(text: str) -> frozenset[str]:
    return frozenset(t for t in re.split(r"[^0-9a-z]+", text.lower()) if t)


def token_overlap(query: str, caption: str) -> float:
    return float(len(tokens(query) & tokens(caption)))


def occupied_footprint(voxels: SemanticGrid) -> tuple[float, float, float]:
    occ = np.nonzero(voxels.labels)
    if not occ[0].size:
        return (0.0, 0.0, 0.0)
    return tuple(float((a.max() - a.min() + 1) * voxels.voxel_size) for a in occ)


@dataclass(frozen=True, eq=False)
class ActorAsset:
    """A foreground object in its local frame.

    The local frame has its origin at the footprint center on the ground,
    x forward and z up; ``voxels.origin`` is placed accordingly.
    """

    asset_id: str
    label: Label
    caption: str
    voxels: SemanticGrid
    footprint: tuple[float, float, float] | None = None

    def __post_init__(self):
        if not _ID_RE.match(self.asset_id):
            raise BankError(f"asset_id {self.asset_id!r} must match {_ID_RE.pattern}")
        label = Label(int(self.label))
        if label not in FOREGROUND:
            raise BankError(f"{label.name} is not a foreground class")
        object.__setattr__(self, "label", label)
        if "\t" in self.caption or "\n" in self.caption:
            raise BankError("captions may not contain tabs or newlines")
        present = set(np.unique(self.voxels.labels).tolist()) - {0}
        if present - {int(label)}:
            raise BankError(f"asset {self.asset_id!r} holds voxels of other classes: {sorted(present)}")
        bbox = occupied_footprint(self.voxels)
        fp = bbox if self.footprint is None else tuple(float(v) for v in self.footprint)
        if any(abs(a - b) > self.voxels.voxel_size for a, b in zip(fp, bbox)):
            raise BankError(f"asset {self.asset_id!r}: footprint {fp} disagrees with voxel bbox {bbox}")
        object.__setattr__(self, "footprint", fp)

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.voxels.labels))

    @property
    def default_speed(self) -> float:
        return DEFAULT_SPEED.get(self.label, 0.0)

    def __eq__(self, other):
        if not isinstance(other, ActorAsset):
            return NotImplemented
        return (
            self.asset_id == other.asset_id
            and self.label == other.label
            and self.caption == other.caption
            and self.footprint == other.footprint
            and self.voxels == other.voxels
        )

    __hash__ = None


@dataclass(frozen=True)
class ActorInstance:
    instance_id: int
    asset_id: str
    pose: Pose
    speed: float = 0.0

    def moved(self, pose: Pose, speed: float) -> "ActorInstance":
        return ActorInstance(self.instance_id, self.asset_id, pose, speed)


def box_asset(asset_id: str, label: Label, caption: str, size_vox, voxel_size: float = 0.5,
              carve=None) -> ActorAsset:
    """Parametric box asset; ``carve`` optionally blanks voxels (a bool mask)."""
    nx, ny, nz = size_vox
    labels = np.full((nx, ny, nz), int(label), dtype=np.uint8)
    if carve is not None:
        labels[np.asarray(carve, dtype=bool)] = 0
    origin = (-nx * voxel_size / 2.0, -ny * voxel_size / 2.0, 0.0)
    return ActorAsset(asset_id, label, caption, SemanticGrid(labels, voxel_size, origin))


def _odd(meters: float, voxel_size: float) -> int:
    n = max(1, int(round(meters / voxel_size)))
    return n if n % 2 else n + 1


def builtin_bank(voxel_size: float = 0.5) -> "ActorBank":
    """Zero-data mini bank: sedan, bus, pedestrian and cyclist shapes.

    Footprints use odd voxel counts so asset voxel centers fall on world
    voxel centers when the pose is voxel-aligned.
    """
    vs = voxel_size
    sedan = (_odd(4.5, vs), _odd(1.8, vs), max(2, round(1.5 / vs)))
    carve = np.zeros(sedan, dtype=bool)
    # lower the hood and trunk: cabin occupies the middle half
    q = sedan[0] // 4
    carve[:q, :, sedan[2] - 1 :] = True
    carve[sedan[0] - q :, :, sedan[2] - 1 :] = True
    bus = (_odd(12.0, vs), _odd(2.5, vs), max(2, round(3.2 / vs)))
    ped = (1, 1, max(2, round(1.7 / vs)))
    bike = (_odd(1.8, vs), 1, max(2, round(1.7 / vs)))
    return ActorBank(
        [
            box_asset("sedan", Label.CAR, "red sedan car", sedan, vs, carve),
            box_asset("bus", Label.BUS, "city bus", bus, vs),
            box_asset("pedestrian", Label.PEDESTRIAN, "adult pedestrian walking", ped, vs),
            box_asset("cyclist", Label.BICYCLE, "cyclist riding a bicycle", bike, vs),
        ]
    )


class ActorBank(Mapping):
    """Immutable mapping ``asset_id -> ActorAsset`` iterated in id order."""

    def __init__(self, assets: Iterable[ActorAsset] = ()):
        d = {}
        for a in assets:
            if a.asset_id in d:
                raise BankError(f"duplicate asset_id {a.asset_id!r}")
            d[a.asset_id] = a
        self._assets = dict(sorted(d.items()))

    def __getitem__(self, key):
        return self._assets[key]

    def __iter__(self):
        return iter(self._assets)

    def __len__(self):
        return len(self._assets)

    def __eq__(self, other):
        if not isinstance(other, ActorBank):
            return NotImplemented
        return list(self._assets) == list(other._assets) and all(
            self._assets[k] == other._assets[k] for k in self._assets
        )

    __hash__ = None

    def with_asset(self, asset: ActorAsset) -> "ActorBank":
        return ActorBank([*self.values(), asset])

    def of_class(self, label) -> list[ActorAsset]:
        return [a for a in self.values() if a.label == int(label)]


def select_by_caption(bank: ActorBank, query: str, seed: int,
                      scorer: Callable[[str, str], float] = token_overlap) -> ActorAsset:
    """Best caption match; ties go to the smaller asset_id.

    With no overlapping tokens at all, falls back to a seeded uniform pick.
    """
    if not len(bank):
        raise BankError("actor bank is empty")
    ids = list(bank)
    scores = [scorer(query, bank[i].caption) for i in ids]
    best = max(scores)
    if best <= 0:
        rng = np.random.default_rng(seed)
        return bank[ids[int(rng.integers(len(ids)))]]
    return bank[ids[scores.index(best)]]


def sample_by_category(bank: ActorBank, label, count: int, seed: int) -> list[ActorAsset]:
    """Seeded draws with replacement from the assets of one class."""
    pool = bank.of_class(label)
    if not pool:
        raise BankError(f"no asset of class {Label(int(label)).name} in bank")
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    return [pool[int(i)] for i in rng.integers(len(pool), size=count)]


def _fmt(x: float) -> str:
    return repr(float(x))


def save_bank(bank: ActorBank, path) -> None:
    """Write ``<path>/manifest.tsv`` plus one ``<asset_id>.occ4`` per asset.

    Manifest columns, tab separated: asset_id, class name, length, width,
    height (meters, repr floats), caption.
    """
    os.makedirs(path, exist_ok=True)
    lines = []
    for a in bank.values():
        save_grid(a.voxels, os.path.join(path, a.asset_id + ".occ4"))
        lines.append("\t".join([a.asset_id, a.label.name.lower(), *map(_fmt, a.footprint), a.caption]))
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as f:
        f.write("".join(line + "\n" for line in lines))


def load_bank(path) -> ActorBank:
    manifest = os.path.join(path, MANIFEST)
    assets = []
    seen = set()
    with open(manifest, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise BankError(f"{manifest}:{n}: expected 6 tab-separated fields, got {len(parts)}")
            asset_id, cls, length, width, height, caption = parts
            if asset_id in seen:
                raise BankError(f"{manifest}:{n}: duplicate asset_id {asset_id!r}")
            seen.add(asset_id)
            try:
                label = Label[cls.upper()]
            except KeyError:
                raise BankError(f"{manifest}:{n}: unknown class {cls!r}") from None
            grid_path = os.path.join(path, asset_id + ".occ4")
            if not os.path.exists(grid_path):
                raise MissingAssetError(asset_id, grid_path)
            assets.append(
                ActorAsset(asset_id, label, caption, load_grid(grid_path), (float(length), float(width), float(height)))
            )
    return ActorBank(assets)


def import_asset(bank: ActorBank, grid: SemanticGrid, asset_id: str, label, caption: str) -> ActorBank:
    """Add a segmented grid as an asset, re-centering it on its footprint."""
    occ = np.nonzero(grid.labels)
    if not occ[0].size:
        raise BankError("cannot import an empty grid")
    lo = [int(a.min()) for a in occ]
    hi = [int(a.max()) + 1 for a in occ]
    crop = grid.labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    crop = np.where(crop != 0, int(label), 0).astype(np.uint8)
    vs = grid.voxel_size
    origin = (-crop.shape[0] * vs / 2.0, -crop.shape[1] * vs / 2.0, 0.0)
    return bank.with_asset(ActorAsset(asset_id, Label(int(label)), caption, SemanticGrid(crop, vs, origin)))

