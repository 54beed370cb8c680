"""Depth maps from occupancy grids (ray casting) and from LiDAR projection.

Pixel ``(u, v)`` shoots the ray ``K^-1 (u + 0.5, v + 0.5, 1)``; the ray
parameter is therefore camera-frame z, and that planar depth is what gets
stored. ``0.0`` marks pixels without a hit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numba
import numpy as np

# the bundled TBB is too old for numba; skip it instead of warning on every run
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .geometry import OccupancyGrid, RigidTransform
from .voxelizer import PointCloud

EPS_NEAR = 1e-4
DEFAULT_MAX_RANGE = 100.0
NO_HIT = -1


@dataclass(frozen=True, eq=False)
class CameraModel:
    K: np.ndarray
    camera_to_ego: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if not np.all(np.isfinite(K)) or abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsic matrix is not invertible")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be at least 1x1")
        K.flags.writeable = False
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not isinstance(self.camera_to_ego, RigidTransform):
            object.__setattr__(self, "camera_to_ego", RigidTransform(self.camera_to_ego))

    @classmethod
    def from_params(cls, fx, fy, cx, cy, width, height, camera_to_ego=None) -> "CameraModel":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, camera_to_ego or RigidTransform.identity(), width, height)

    def ray_directions(self) -> np.ndarray:
        """Camera-frame directions ``(H, W, 3)`` with unit z."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(u, v)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d = pix @ np.linalg.inv(self.K).T
        # exact unit z so that the ray parameter is planar depth
        d = d / d[..., 2:3]
        return d

    def ego_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Ray origin (3,) and ego-frame directions ``(H, W, 3)``."""
        r = self.camera_to_ego.rotation
        return self.camera_to_ego.translation.copy(), self.ray_directions() @ r.T


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if vals.ndim != 2:
            raise ValueError("depth map must be 2-D (height, width)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite depth")
        if np.any(vals < 0):
            raise ValueError("negative depth")
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def to_uint16(self) -> np.ndarray:
        """Depth quantised to 1/256 m, 0 = invalid, saturating at 65535."""
        q = np.round(self.values.astype(np.float64) * 256.0)
        q = np.clip(q, 0, 65535).astype(np.uint16)
        q[self.values > 0] = np.maximum(q[self.values > 0], 1)
        return q

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.values.tobytes() == other.values.tobytes() and self.values.shape == other.values.shape

    __hash__ = None


@numba.njit(cache=True, inline="always")
def _first_voxel(p, v, n, r):
    """Index of the cell the ray occupies just after the point ``p`` on one axis."""
    i = int(math.floor(p / v))
    if r > 0.0 and (i + 1) * v <= p:
        i += 1
    elif r < 0.0 and i * v >= p:
        i -= 1
    # the entry point lies on the grid surface up to rounding
    return min(max(i, 0), n - 1)


@numba.njit(cache=True, inline="always")
def _next_cross(i, v, o, r):
    if r > 0.0:
        return ((i + 1) * v - o) / r
    if r < 0.0:
        return (i * v - o) / r
    return np.inf


@numba.njit(cache=True)
def _trace_exact(labels, origin, vs, o, r, max_range):
    """Incremental boundary-crossing walk; returns (t_hit, flat index) or (-1, -1)."""
    nx, ny, nz = labels.shape
    # ray origin relative to the grid corner
    ox = o[0] - origin[0]
    oy = o[1] - origin[1]
    oz = o[2] - origin[2]
    rx, ry, rz = r[0], r[1], r[2]
    vx, vy, vz = vs[0], vs[1], vs[2]

    t0 = 0.0
    t1 = max_range
    for ro, rd, hi in ((ox, rx, nx * vx), (oy, ry, ny * vy), (oz, rz, nz * vz)):
        if rd == 0.0:
            if ro < 0.0 or ro >= hi:
                return -1.0, -1
        else:
            ta = -ro / rd
            tb = (hi - ro) / rd
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    if t0 > t1:
        return -1.0, -1

    i = _first_voxel(ox + t0 * rx, vx, nx, rx)
    j = _first_voxel(oy + t0 * ry, vy, ny, ry)
    k = _first_voxel(oz + t0 * rz, vz, nz, rz)
    si = 1 if rx > 0.0 else (-1 if rx < 0.0 else 0)
    sj = 1 if ry > 0.0 else (-1 if ry < 0.0 else 0)
    sk = 1 if rz > 0.0 else (-1 if rz < 0.0 else 0)
    tx = _next_cross(i, vx, ox, rx)
    ty = _next_cross(j, vy, oy, ry)
    tz = _next_cross(k, vz, oz, rz)

    t = t0
    while True:
        if labels[i, j, k] != 0:
            return t, (i * ny + j) * nz + k
        if tx <= ty and tx <= tz:
            tn = tx
            i += si
            if i < 0 or i >= nx:
                return -1.0, -1
            tx = _next_cross(i, vx, ox, rx)
        elif ty <= tz:
            tn = ty
            j += sj
            if j < 0 or j >= ny:
                return -1.0, -1
            ty = _next_cross(j, vy, oy, ry)
        else:
            tn = tz
            k += sk
            if k < 0 or k >= nz:
                return -1.0, -1
            tz = _next_cross(k, vz, oz, rz)
        if tn > max_range:
            return -1.0, -1
        if tn > t:
            t = tn


@numba.njit(parallel=True, cache=True)
def _render_exact(labels, origin, vs, o, dirs, max_range, depth, hit):
    h, w = depth.shape
    for v in numba.prange(h):
        for u in range(w):
            t, flat = _trace_exact(labels, origin, vs, o, dirs[v, u], max_range)
            if flat >= 0:
                if t < EPS_NEAR:
                    t = EPS_NEAR
                depth[v, u] = t
                hit[v, u] = flat


@numba.njit(parallel=True, cache=True)
def _render_fixed(labels, origin, vs, o, dirs, step, max_range, depth, hit):
    h, w = depth.shape
    nx, ny, nz = labels.shape
    n_steps = int(math.floor(max_range / step + 1e-9))
    for v in numba.prange(h):
        for u in range(w):
            r = dirs[v, u]
            for k in range(1, n_steps + 1):
                d = k * step
                if d > max_range:
                    break
                i = math.floor((o[0] + d * r[0] - origin[0]) / vs[0])
                j = math.floor((o[1] + d * r[1] - origin[1]) / vs[1])
                m = math.floor((o[2] + d * r[2] - origin[2]) / vs[2])
                if i < 0 or j < 0 or m < 0 or i >= nx or j >= ny or m >= nz:
                    continue
                if labels[int(i), int(j), int(m)] != 0:
                    depth[v, u] = d
                    hit[v, u] = (int(i) * ny + int(j)) * nz + int(m)
                    break


def _prepare(grid: OccupancyGrid, cam: CameraModel):
    o, dirs = cam.ego_rays()
    shape = (cam.height, cam.width)
    return (
        np.ascontiguousarray(grid.labels),
        np.asarray(grid.meta.origin, dtype=np.float64),
        np.asarray(grid.meta.voxel_size, dtype=np.float64),
        o,
        np.ascontiguousarray(dirs),
        np.zeros(shape, dtype=np.float64),
        np.full(shape, NO_HIT, dtype=np.int64),
    )


def raycast_exact_hits(
    grid: OccupancyGrid, cam: CameraModel, max_range: float = DEFAULT_MAX_RANGE
) -> Tuple[np.ndarray, np.ndarray]:
    """Float64 depth and flat hit-voxel index (``-1`` on miss) per pixel."""
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    labels, origin, vs, o, dirs, depth, hit = _prepare(grid, cam)
    _render_exact(labels, origin, vs, o, dirs, float(max_range), depth, hit)
    return depth, hit


def raycast_fixed_hits(
    grid: OccupancyGrid,
    cam: CameraModel,
    step: Optional[float] = None,
    max_range: float = DEFAULT_MAX_RANGE,
) -> Tuple[np.ndarray, np.ndarray]:
    if step is None:
        step = 0.5 * min(grid.meta.voxel_size)
    if not step > 0:
        raise ValueError("step must be positive")
    if not max_range > step:
        raise ValueError("max_range must exceed step")
    labels, origin, vs, o, dirs, depth, hit = _prepare(grid, cam)
    _render_fixed(labels, origin, vs, o, dirs, float(step), float(max_range), depth, hit)
    return depth, hit


def raycast_depth_exact(
    grid: OccupancyGrid, cam: CameraModel, max_range: float = DEFAULT_MAX_RANGE
) -> DepthMap:
    """Depth to the first non-free voxel pierced by each pixel ray."""
    return DepthMap(raycast_exact_hits(grid, cam, max_range)[0])


def raycast_depth_fixed(
    grid: OccupancyGrid,
    cam: CameraModel,
    step: Optional[float] = None,
    max_range: float = DEFAULT_MAX_RANGE,
) -> DepthMap:
    """March each pixel ray at ``step, 2*step, ...``; first sample in a non-free voxel wins.

    ``step`` defaults to half the smallest voxel edge.
    """
    return DepthMap(raycast_fixed_hits(grid, cam, step, max_range)[0])


def project_lidar_depth(
    clouds: Sequence[Tuple[PointCloud, RigidTransform]], cam: CameraModel
) -> DepthMap:
    """Z-buffer projection of one or more clouds, each with its pose in the current ego frame."""
    ego_to_cam = cam.camera_to_ego.inverse()
    depth = np.full(cam.height * cam.width, np.inf)
    for pc, to_ego in clouds:
        if len(pc) == 0:
            continue
        pts = ego_to_cam.apply(to_ego.apply(pc.points))
        pts = pts[pts[:, 2] > 0]
        if len(pts) == 0:
            continue
        uvw = pts @ cam.K.T
        u = np.floor(uvw[:, 0] / uvw[:, 2])
        v = np.floor(uvw[:, 1] / uvw[:, 2])
        ok = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        flat = v[ok].astype(np.int64) * cam.width + u[ok].astype(np.int64)
        np.minimum.at(depth, flat, pts[ok, 2])
    depth[~np.isfinite(depth)] = 0.0
    return DepthMap(depth.reshape(cam.height, cam.width))


def set_workers(n: Optional[int]) -> None:
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
