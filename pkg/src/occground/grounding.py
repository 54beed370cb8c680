"""Ground-truth occupancy extraction, box refinement and random baselines.

Baseline draws use numpy's PCG64 generator. Each sample gets its own
stream seeded with ``global_seed XOR h(sample_id)``, where ``h`` is the
first 8 bytes (little-endian) of the BLAKE2b digest of the UTF-8 id, so
results do not depend on evaluation order or worker count.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    FREE,
    Box3D,
    OccupancyGrid,
    VoxelSet,
    box_contains_points,
    voxel_centers,
    voxels_from_array,
)

SAME_CLASS = "same-class"
ALL_BOXES = "all"


@dataclass
class GroundingSample:
    sample_id: str
    prompt: str
    box: Box3D
    category: int
    is_unique: bool
    grid_ref: str
    all_boxes: List[Tuple[Box3D, int]] = field(default_factory=list)
    split: str = "val"
    # unknown JSON fields, kept so files survive a read/write round trip
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class GroundingPrediction:
    sample_id: str
    voxels: VoxelSet
    pred_box: Optional[Box3D] = None


def _box_candidates(box: Box3D, grid: OccupancyGrid) -> np.ndarray:
    """Indices of voxels whose centres may lie in ``box`` (conservative AABB cut)."""
    meta = grid.meta
    corners = box.corners()
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    origin = np.asarray(meta.origin)
    vs = np.asarray(meta.voxel_size)
    i0 = np.maximum(np.floor((lo - origin) / vs).astype(np.int64) - 1, 0)
    i1 = np.minimum(np.floor((hi - origin) / vs).astype(np.int64) + 2, meta.dims)
    if np.any(i1 <= i0):
        return np.zeros((0, 3), dtype=np.int64)
    sub = grid.labels[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]]
    return np.argwhere(sub != FREE) + i0


def extract_gt_occupancy(grid: OccupancyGrid, box: Box3D) -> VoxelSet:
    """Occupied voxels whose centres fall inside ``box``."""
    return voxels_from_array(_inside(grid, box))


def _inside(grid: OccupancyGrid, box: Box3D) -> np.ndarray:
    idx = _box_candidates(box, grid)
    if len(idx) == 0:
        return idx
    keep = box_contains_points(box, voxel_centers(idx, grid.meta))
    return idx[keep]


def refine_two_stage(grid: OccupancyGrid, pred_box: Box3D) -> VoxelSet:
    """Second stage of a two-stage grounder: keep predicted-occupied voxels inside the predicted box."""
    return extract_gt_occupancy(grid, pred_box)


def binary_mask(grid: OccupancyGrid) -> np.ndarray:
    return grid.labels != FREE


def sample_seed(global_seed: int, sample_id: str) -> int:
    digest = hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest()
    return (int(global_seed) & 0xFFFFFFFFFFFFFFFF) ^ int.from_bytes(digest, "little")


def _pick_box(sample: GroundingSample, rng_seed: int, candidates: str) -> Tuple[Box3D, int]:
    if not sample.all_boxes:
        raise ValueError(f"sample {sample.sample_id!r} has no scene boxes")
    if candidates not in (SAME_CLASS, ALL_BOXES):
        raise ValueError(f"unknown candidate mode {candidates!r}")
    pool = list(sample.all_boxes)
    if candidates == SAME_CLASS:
        same = [bc for bc in pool if bc[1] == sample.category]
        pool = same or pool
    rng = np.random.Generator(np.random.PCG64(sample_seed(rng_seed, sample.sample_id)))
    return pool[int(rng.integers(len(pool)))]


def gt_rand_baseline(
    sample: GroundingSample,
    grid: OccupancyGrid,
    rng_seed: int,
    candidates: str = SAME_CLASS,
) -> GroundingPrediction:
    """Random scene box; predict the voxels labelled with that box's class inside it."""
    box, cls = _pick_box(sample, rng_seed, candidates)
    idx = _inside(grid, box)
    if len(idx):
        idx = idx[grid.labels[idx[:, 0], idx[:, 1], idx[:, 2]] == cls]
    return GroundingPrediction(sample.sample_id, voxels_from_array(idx), box)


def box_rand_baseline(
    sample: GroundingSample,
    grid: OccupancyGrid,
    rng_seed: int,
    candidates: str = SAME_CLASS,
) -> GroundingPrediction:
    """Random scene box; predict the ground-truth occupancy inside it."""
    box, _ = _pick_box(sample, rng_seed, candidates)
    return GroundingPrediction(sample.sample_id, extract_gt_occupancy(grid, box), box)


BASELINES = {"gt-rand": gt_rand_baseline, "box-rand": box_rand_baseline}
