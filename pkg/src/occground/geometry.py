"""Voxel-lattice geometry, rigid transforms and yaw-rotated boxes.

Everything here is an immutable value. Grids use a dense ``(nx, ny, nz)``
label array in C order, so the flat layout is x-major, then y, then z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

FREE = 0
BOX_EPS = 1e-9

Index3 = Tuple[int, int, int]
VoxelSet = frozenset  # frozenset[Index3]

# Benchmark grid: [-40, 40] m in x/y, [-1, 5.4] m in z, 0.4 m voxels.
CANONICAL_RANGE = (-40.0, -40.0, -1.0, 40.0, 40.0, 5.4)
CANONICAL_VOXEL_SIZE = 0.4


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class GridMeta:
    dims: Index3
    origin: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        vs = self.voxel_size
        if np.isscalar(vs):
            vs = (vs, vs, vs)
        vs = tuple(float(v) for v in vs)
        if len(dims) != 3 or len(origin) != 3 or len(vs) != 3:
            raise ValueError("dims, origin and voxel_size must have 3 components")
        if any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if not all(v > 0 and math.isfinite(v) for v in vs):
            raise ValueError(f"voxel size must be positive, got {vs}")
        if not all(math.isfinite(o + d * v) for o, d, v in zip(origin, dims, vs)):
            raise ValueError("grid extent is not finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", vs)

    @classmethod
    def from_range(cls, pc_range: Sequence[float], voxel_size) -> "GridMeta":
        """Build a grid covering ``(xmin, ymin, zmin, xmax, ymax, zmax)``."""
        lo = np.asarray(pc_range[:3], dtype=np.float64)
        hi = np.asarray(pc_range[3:], dtype=np.float64)
        vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
        dims = np.round((hi - lo) / vs).astype(int)
        return cls(tuple(dims), tuple(lo), tuple(vs))

    @classmethod
    def canonical(cls) -> "GridMeta":
        return cls.from_range(CANONICAL_RANGE, CANONICAL_VOXEL_SIZE)

    @property
    def upper(self) -> Tuple[float, float, float]:
        return tuple(o + d * v for o, d, v in zip(self.origin, self.dims, self.voxel_size))

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def contains_index(self, v: Sequence[int]) -> bool:
        return all(0 <= int(a) < d for a, d in zip(v, self.dims))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Per-voxel semantic labels; 0 is free, anything else is a class id."""

    meta: GridMeta
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            if labels.size != self.meta.num_voxels:
                raise ValueError(
                    f"labels length {labels.size} != {self.meta.num_voxels} voxels"
                )
            labels = labels.reshape(self.meta.dims)
        if labels.shape != self.meta.dims:
            raise ValueError(f"labels shape {labels.shape} != dims {self.meta.dims}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ValueError("labels must fit in an unsigned byte")
            labels = labels.astype(np.uint8)
        labels = np.ascontiguousarray(labels)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @classmethod
    def empty(cls, meta: GridMeta) -> "OccupancyGrid":
        return cls(meta, np.zeros(meta.dims, dtype=np.uint8))

    def label(self, v: Sequence[int]) -> int:
        return int(self.labels[tuple(int(a) for a in v)])

    def occupied(self) -> VoxelSet:
        return voxels_from_array(np.argwhere(self.labels != FREE))

    def with_labels(self, labels: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.meta, labels)

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.labels, other.labels)

    __hash__ = None


def voxels_from_array(idx) -> VoxelSet:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    return frozenset(map(tuple, idx.tolist()))


def voxels_to_array(voxels: Iterable[Index3]) -> np.ndarray:
    """Sorted ``(N, 3)`` int64 array; sorting makes serialization deterministic."""
    arr = np.array(sorted(voxels), dtype=np.int64).reshape(-1, 3)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 homogeneous rigid transform (rotation det +1, metres)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform contains non-finite values")
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), rtol=0, atol=1e-12):
            raise ValueError("last row of a rigid transform must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), rtol=0, atol=1e-9):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block has determinant -1 (reflection)")
        m[3] = (0.0, 0.0, 0.0, 1.0)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rt(rot_z(yaw), translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        r = self.rotation
        return RigidTransform.from_rt(r.T, -r.T @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an ``(N, 3)`` array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_transform(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


@dataclass(frozen=True)
class Box3D:
    """Box with centre, size ``(l, w, h)`` and yaw about +z.

    ``l`` runs along the box's heading (local x), ``w`` along local y.
    """

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("box center and size must have 3 components")
        if not all(math.isfinite(c) for c in center) or not math.isfinite(self.yaw):
            raise ValueError("box has non-finite values")
        if not all(s > 0 and math.isfinite(s) for s in size):
            raise ValueError("non-positive box size")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def corners(self) -> np.ndarray:
        """The 8 corners, ``(8, 3)``, in the parent frame."""
        l, w, h = self.size
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        local = signs * (0.5 * np.array([l, w, h]))
        return local @ rot_z(self.yaw).T + np.asarray(self.center)

    def scaled(self, factor: float) -> "Box3D":
        return Box3D(self.center, tuple(s * factor for s in self.size), self.yaw)


def voxel_index(p, meta: GridMeta) -> Optional[Index3]:
    """Voxel containing ``p``; ``None`` when ``p`` is outside the grid."""
    idx = []
    for x, o, v, d in zip(p, meta.origin, meta.voxel_size, meta.dims):
        i = math.floor((float(x) - o) / v)
        if i < 0 or i >= d:
            return None
        idx.append(i)
    return tuple(idx)


def voxel_indices(points, meta: GridMeta) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`voxel_index`: ``(idx (N, 3) int64, in_bounds (N,) bool)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.floor((p - np.asarray(meta.origin)) / np.asarray(meta.voxel_size))
    ok = np.all((q >= 0) & (q < np.asarray(meta.dims)), axis=1)
    idx = np.zeros(q.shape, dtype=np.int64)
    idx[ok] = q[ok].astype(np.int64)
    return idx, ok


def voxel_center(v: Sequence[int], meta: GridMeta) -> np.ndarray:
    if not meta.contains_index(v):
        raise IndexError(f"voxel {tuple(v)} outside grid dims {meta.dims}")
    return np.array(
        [o + (int(i) + 0.5) * s for i, o, s in zip(v, meta.origin, meta.voxel_size)]
    )


def voxel_centers(idx: np.ndarray, meta: GridMeta) -> np.ndarray:
    idx = np.asarray(idx).reshape(-1, 3)
    return np.asarray(meta.origin) + (idx.astype(np.float64) + 0.5) * np.asarray(meta.voxel_size)


def box_contains(box: Box3D, p) -> bool:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = float(p[0]) - box.center[0]
    dy = float(p[1]) - box.center[1]
    dz = float(p[2]) - box.center[2]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    l, w, h = box.size
    return (
        abs(lx) <= l / 2 + BOX_EPS
        and abs(ly) <= w / 2 + BOX_EPS
        and abs(dz) <= h / 2 + BOX_EPS
    )


def box_contains_points(box: Box3D, points) -> np.ndarray:
    # Same arithmetic, in the same order, as box_contains.
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = p[:, 0] - box.center[0]
    dy = p[:, 1] - box.center[1]
    dz = p[:, 2] - box.center[2]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    l, w, h = box.size
    return (
        (np.abs(lx) <= l / 2 + BOX_EPS)
        & (np.abs(ly) <= w / 2 + BOX_EPS)
        & (np.abs(dz) <= h / 2 + BOX_EPS)
    )


def transform_box(t: RigidTransform, box: Box3D, tol: float = 1e-6) -> Box3D:
    """Move a box by a rigid transform whose rotation is about z only."""
    r = t.rotation
    off = max(abs(r[2, 0]), abs(r[2, 1]), abs(r[0, 2]), abs(r[1, 2]), abs(r[2, 2] - 1.0))
    if off > tol:
        raise ValueError("non-planar pose")
    yaw = box.yaw + math.atan2(r[1, 0], r[0, 0])
    return Box3D(tuple(t.apply(box.center)), box.size, yaw)
