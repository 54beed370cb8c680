"""Point cloud cropping and occupancy voxelization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import FREE, GridMeta, OccupancyGrid, voxel_indices


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (len(pts),):
                raise ValueError("labels must have one entry per point")
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ValueError("point labels must fit in an unsigned byte")
            object.__setattr__(self, "labels", labels.astype(np.uint8))

    def __len__(self):
        return len(self.points)

    def select(self, mask) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(self.points[mask], labels)


def crop_to_range(pc: PointCloud, meta: GridMeta) -> PointCloud:
    _, ok = voxel_indices(pc.points, meta)
    return pc.select(ok)


def voxelize(pc: PointCloud, meta: GridMeta, fill_label: int = 1) -> OccupancyGrid:
    """Mark every voxel holding at least one in-range point as occupied.

    With per-point labels a voxel takes its most frequent label; ties go to
    the smallest class id. Without labels every hit voxel gets ``fill_label``.
    """
    if pc.labels is None and not 0 < int(fill_label) <= 255:
        raise ValueError("fill_label must be a non-zero class id")
    if pc.labels is not None and np.any(pc.labels == FREE):
        raise ValueError("per-point label 0 is reserved for free space")

    idx, ok = voxel_indices(pc.points, meta)
    labels = np.zeros(meta.num_voxels, dtype=np.uint8)
    if not ok.any():
        return OccupancyGrid(meta, labels)

    nx, ny, nz = meta.dims
    idx = idx[ok]
    flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]

    if pc.labels is None:
        labels[flat] = fill_label
        return OccupancyGrid(meta, labels)

    # count (voxel, label) pairs, then per voxel keep max count / min label
    key = flat * 256 + pc.labels[ok].astype(np.int64)
    uniq, counts = np.unique(key, return_counts=True)
    vox, lab = uniq // 256, uniq % 256
    order = np.lexsort((lab, -counts, vox))
    vox, lab = vox[order], lab[order]
    first = np.ones(len(vox), dtype=bool)
    first[1:] = vox[1:] != vox[:-1]
    labels[vox[first]] = lab[first]
    return OccupancyGrid(meta, labels)
