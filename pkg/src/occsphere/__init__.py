"""Deterministic semantic-occupancy driving world simulator."""
from .core import (
    BevCode,
    BevMap,
    Label,
    OverlapMask,
    Pose,
    SemanticGrid,
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

__version__ = "0.1.0"

__all__ = [
    "BevCode",
    "BevMap",
    "Label",
    "OverlapMask",
    "Pose",
    "SemanticGrid",
    "decode_bev",
    "decode_grid",
    "encode_bev",
    "encode_grid",
    "load_bev",
    "load_grid",
    "normalize_yaw",
    "save_bev",
    "save_grid",
    "voxel_to_world",
    "world_to_voxel",
]
