import math

import numpy as np
import pytest

from occground.geometry import Box3D, GridMeta, OccupancyGrid, RigidTransform, box_contains, voxel_center


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rigid(rng, scale=10.0) -> RigidTransform:
    return RigidTransform.from_rt(random_rotation(rng), rng.uniform(-scale, scale, 3))


def random_grid(rng, max_dim=32, density=None) -> OccupancyGrid:
    dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, 3))
    vs = tuple(rng.uniform(0.1, 1.0, 3))
    origin = tuple(rng.uniform(-5, 5, 3))
    meta = GridMeta(dims, origin, vs)
    p = rng.uniform(0.0, 0.6) if density is None else density
    occ = rng.random(dims) < p
    labels = np.where(occ, rng.integers(1, 6, dims), 0).astype(np.uint8)
    return OccupancyGrid(meta, labels)


def random_box_in(rng, meta: GridMeta) -> Box3D:
    lo = np.asarray(meta.origin)
    hi = np.asarray(meta.upper)
    center = rng.uniform(lo, hi)
    size = rng.uniform(0.05, 0.6, 3) * (hi - lo) + 0.01
    return Box3D(tuple(center), tuple(size), rng.uniform(-math.pi, math.pi))


def brute_force_gt(grid: OccupancyGrid, box: Box3D) -> frozenset:
    """Scalar enumeration of every non-free voxel centre against the box."""
    out = set()
    nx, ny, nz = grid.meta.dims
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if grid.labels[i, j, k] != 0 and box_contains(box, voxel_center((i, j, k), grid.meta)):
                    out.add((i, j, k))
    return frozenset(out)


def bitmap_iou(dims, gt, pred) -> float:
    """IoU by counting on dense boolean bitmaps."""
    a = np.zeros(dims, dtype=bool)
    b = np.zeros(dims, dtype=bool)
    for v in gt:
        a[v] = True
    for v in pred:
        b[v] = True
    return int(np.count_nonzero(a & b)) / int(np.count_nonzero(a | b))


def ray_voxel_oracle(grid: OccupancyGrid, origin, direction, max_range, eta=1e-7):
    """Earliest entry parameter over all non-free voxels by slab intersection.

    Voxels the ray only grazes (penetration <= eta) are ignored. Returns
    ``None`` when nothing is pierced within ``[0, max_range]``.
    """
    idx = np.argwhere(grid.labels != 0)
    if len(idx) == 0:
        return None
    vs = np.asarray(grid.meta.voxel_size)
    lo = np.asarray(grid.meta.origin) + idx * vs
    hi = lo + vs
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t_in = np.full(len(idx), 0.0)
    t_out = np.full(len(idx), float(max_range))
    for a in range(3):
        if d[a] == 0.0:
            inside = (o[a] >= lo[:, a]) & (o[a] < hi[:, a])
            t_out = np.where(inside, t_out, -np.inf)
        else:
            ta = (lo[:, a] - o[a]) / d[a]
            tb = (hi[:, a] - o[a]) / d[a]
            t_in = np.maximum(t_in, np.minimum(ta, tb))
            t_out = np.minimum(t_out, np.maximum(ta, tb))
    pierced = t_out - t_in > eta
    if not pierced.any():
        return None
    return float(t_in[pierced].min())


# (criterion, passed, detail) rows filled by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"{status}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_scene(rng, max_dim=32, image=(12, 10)):
    """Random grid plus a randomly posed camera near (often inside) it."""
    from occground.depthmap import CameraModel

    grid = random_grid(rng, max_dim=max_dim, density=rng.uniform(0.005, 0.15))
    lo = np.asarray(grid.meta.origin)
    hi = np.asarray(grid.meta.upper)
    pad = 0.5 * (hi - lo)
    pos = rng.uniform(lo - pad, hi + pad)
    # aim roughly at the grid centre so most rays see something
    target = rng.uniform(lo, hi)
    fwd = target - pos
    fwd /= np.linalg.norm(fwd)
    up = rng.normal(size=3)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)  # camera axes in ego coords
    w, h = image
    f = rng.uniform(0.4, 1.5) * w
    cam = CameraModel.from_params(f, f * rng.uniform(0.8, 1.2), w / 2 + rng.uniform(-2, 2),
                                  h / 2 + rng.uniform(-2, 2), w, h, RigidTransform.from_rt(rot, pos))
    return grid, cam


def backprojection_violations(grid, cam, depth, hit, max_range, tol=1e-4):
    """Pixels breaking the consistency rule, as (v, u, reason) tuples.

    For a valid pixel the point at depth D must lie on the (closed) cell of a
    non-free voxel, and no non-free voxel may be pierced before D. Invalid
    pixels must have no non-free voxel pierced within range.
    """
    from occground.depthmap import EPS_NEAR

    o, dirs = cam.ego_rays()
    nx, ny, nz = grid.meta.dims
    vs = np.asarray(grid.meta.voxel_size)
    bad = []
    for v in range(cam.height):
        for u in range(cam.width):
            d = float(depth[v, u])
            t_star = ray_voxel_oracle(grid, o, dirs[v, u], max_range)
            if d == 0.0:
                if t_star is not None and t_star < max_range - tol:
                    bad.append((v, u, "missed hit"))
                continue
            if t_star is None:
                bad.append((v, u, "phantom hit"))
                continue
            if d < max(t_star, EPS_NEAR) - tol:
                bad.append((v, u, "hit before first pierced voxel"))
            if d > max(t_star, EPS_NEAR) + tol:
                bad.append((v, u, "earlier non-free voxel skipped"))
            flat = int(hit[v, u])
            cell = np.array([flat // (ny * nz), (flat // nz) % ny, flat % nz])
            if grid.labels[tuple(cell)] == 0:
                bad.append((v, u, "hit voxel is free"))
            p = o + max(d, 0.0) * dirs[v, u]
            lo = np.asarray(grid.meta.origin) + cell * vs
            if d > EPS_NEAR and (np.any(p < lo - tol) or np.any(p > lo + vs + tol)):
                bad.append((v, u, "point at depth outside hit voxel"))
    return bad


def _box_json(center, size, yaw=0.0, **extra):
    return {"center": list(center), "size": list(size), "yaw": yaw, **extra}


def write_raw_fixture(root, shuffle_seed=None):
    """Five raw samples on the canonical grid: three pass, one is out of
    range, one boxes only free space. Returns the raw directory."""
    import json
    from pathlib import Path

    from occground.formats import write_grid

    root = Path(root)
    (root / "grids").mkdir(parents=True, exist_ok=True)
    (root / "clouds").mkdir(exist_ok=True)
    meta = GridMeta.canonical()
    labels = np.zeros(meta.dims, dtype=np.uint8)
    # two cars (class 4): 3 and 5 voxels; voxel (i, j, k) spans origin + 0.4 * idx
    labels[125, 100, 2:5] = 4  # x in [10, 10.4], z in [-0.2, 1.0)
    labels[75, 100:105, 2] = 4  # x in [-10, -9.6]
    labels[100, 150, 3:7] = 7  # pedestrian at y = 20
    write_grid(root / "grids" / "scene0.occg", OccupancyGrid(meta, labels), sparse=True)
    # a bus seen as a lidar cloud, voxelized at build time
    pts = np.array([[-5.0 + 0.4 * i, 5.0, 1.1] for i in range(6)])
    np.savez(root / "clouds" / "scene1.npz", points=pts, labels=np.full(6, 6, dtype=np.uint8))

    car_a = _box_json((10.2, 0.2, 0.4), (1.0, 1.0, 1.4), category=4)
    car_b = _box_json((-9.8, 1.0, -0.0), (1.0, 2.2, 0.6), category=4)
    ped = _box_json((0.2, 20.2, 1.0), (0.8, 0.8, 2.0), category=7)
    # source frame rotated a quarter turn about z: ego = R @ src
    rot = [[0.0, -1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
    bus_src = _box_json((5.0, 4.0, 1.0), (3.0, 1.0, 1.0), -math.pi / 2, category=6)
    samples = [
        {"sample_id": "tok-a", "prompt": "the car on the right", "category": 4, "split": "train",
         "box": car_a, "grid_file": "grids/scene0.occg", "annotations": [car_a, car_b, ped]},
        {"sample_id": "tok-b", "prompt": "the bus ahead", "category": 6, "split": "train",
         "box": bus_src, "to_ego": rot, "points_file": "clouds/scene1.npz", "annotations": [bus_src]},
        {"sample_id": "tok-c", "prompt": "the truck far away", "category": 9, "split": "train",
         "box": _box_json((41.0, 0.0, 0.0), (2, 2, 2)), "grid_file": "grids/scene0.occg",
         "annotations": [car_a]},
        {"sample_id": "tok-d", "prompt": "the empty lot", "category": 4, "split": "val",
         "box": _box_json((0.0, -20.0, 1.0), (2, 2, 2)), "grid_file": "grids/scene0.occg",
         "annotations": [car_a]},
        {"sample_id": "tok-e", "prompt": "the person walking", "category": 7, "split": "val",
         "box": ped, "grid_file": "grids/scene0.occg", "annotations": [car_a, car_b, ped]},
    ]
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(samples)
    (root / "index.json").write_text(json.dumps({"version": 1, "samples": samples}))
    return root
