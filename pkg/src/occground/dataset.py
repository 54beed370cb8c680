"""Benchmark construction: ego alignment, range / occupancy filters, splits, statistics.

Raw index layout (``raw_dir/index.json``)::

    {"version": 1,
     "samples": [{"sample_id": str, "prompt": str, "category": int, "split": "train"|"val",
                  "box": {"center": [x, y, z], "size": [l, w, h], "yaw": r},
                  "to_ego": 4x4 list (optional, identity),
                  "grid_file": "grids/x.occg"  |  "points_file": "clouds/x.npz",
                  "annotations": [{"center", "size", "yaw", "category"}, ...]}]}

Boxes and annotations share the source frame given by ``to_ego``. A
``points_file`` is an ``.npz`` with ``points`` (N, 3) in the ego frame and
optional ``labels``; it is voxelized onto the build grid.

Dataset layout written by :func:`write_dataset`: ``annotations.json``,
``manifest.json`` and ``grids/*.occg`` (sparse).
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .formats import (
    FormatError,
    box_from_json,
    read_annotations,
    read_grid,
    write_annotations,
    write_grid,
    write_json,
)
from .geometry import (
    CANONICAL_RANGE,
    Box3D,
    GridMeta,
    OccupancyGrid,
    RigidTransform,
    transform_box,
)
from .grounding import GroundingSample, extract_gt_occupancy
from .voxelizer import PointCloud, voxelize

logger = logging.getLogger(__name__)

REJECT_REASONS = ("center_out_of_range", "no_occupied_voxels", "missing_grid", "missing_prompt")
MANIFEST_VERSION = 1


@dataclass
class RawSample:
    sample_id: str
    prompt: Optional[str]
    box: Box3D
    category: int
    to_ego: RigidTransform = field(default_factory=RigidTransform.identity)
    # zero-argument loader so unreadable grids surface per sample
    grid_source: Optional[str] = None
    load_grid: Optional[Callable[[], OccupancyGrid]] = None
    annotations: List[Tuple[Box3D, int]] = field(default_factory=list)
    split: str = "train"


@dataclass
class DatasetManifest:
    splits: Dict[str, List[str]]
    rejected: List[Tuple[str, str]]

    @property
    def rejection_counts(self) -> Dict[str, int]:
        return dict(sorted(Counter(reason for _, reason in self.rejected).items()))

    @property
    def accepted_count(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "splits": {k: list(v) for k, v in sorted(self.splits.items())},
            "split_counts": {k: len(v) for k, v in sorted(self.splits.items())},
            "rejected": [{"sample_id": s, "reason": r} for s, r in self.rejected],
            "rejection_counts": self.rejection_counts,
        }


def to_ego_frame(raw: RawSample) -> RawSample:
    """Move the referred box and scene annotations into the ego frame."""
    t = raw.to_ego
    return replace(
        raw,
        box=transform_box(t, raw.box),
        annotations=[(transform_box(t, b), c) for b, c in raw.annotations],
        to_ego=RigidTransform.identity(),
    )


def filter_center_range(box: Box3D, pc_range: Sequence[float] = CANONICAL_RANGE) -> bool:
    lo, hi = pc_range[:3], pc_range[3:]
    return all(l <= c <= h for c, l, h in zip(box.center, lo, hi))


def filter_has_occupied(grid: OccupancyGrid, box: Box3D) -> bool:
    return len(extract_gt_occupancy(grid, box)) > 0


def _same_box(a: Box3D, b: Box3D, tol: float = 1e-6) -> bool:
    return (
        np.allclose(a.center, b.center, rtol=0, atol=tol)
        and np.allclose(a.size, b.size, rtol=0, atol=tol)
        and abs(math.remainder(a.yaw - b.yaw, 2 * math.pi)) <= tol
    )


def build_dataset(
    raws: Iterable[RawSample],
    pc_range: Sequence[float] = CANONICAL_RANGE,
    filter_annotations: bool = True,
) -> Tuple[List[GroundingSample], DatasetManifest, Dict[str, OccupancyGrid]]:
    """Filter and ego-align raw samples.

    Returns the accepted samples (sorted by id), the manifest, and the grids
    keyed by ``grid_ref``. With ``filter_annotations`` the scene box list used
    for ``is_unique`` and the baselines keeps only boxes that pass both
    filters; otherwise every annotation is kept.
    """
    raws = list(raws)
    ids = [r.sample_id for r in raws]
    dupes = sorted(k for k, n in Counter(ids).items() if n > 1)
    if dupes:
        raise ValueError(f"duplicate sample_id: {', '.join(dupes)}")

    samples: List[GroundingSample] = []
    rejected: List[Tuple[str, str]] = []
    grids: Dict[str, OccupancyGrid] = {}
    failed_grids: Dict[str, str] = {}

    def grid_for(raw: RawSample) -> Optional[OccupancyGrid]:
        key = raw.grid_source or raw.sample_id
        if key in grids:
            return grids[key]
        if key in failed_grids or raw.load_grid is None:
            return None
        try:
            grids[key] = raw.load_grid()
        except (OSError, ValueError) as exc:
            logger.warning("cannot load grid %s: %s", key, exc)
            failed_grids[key] = str(exc)
            return None
        return grids[key]

    for raw in sorted(raws, key=lambda r: r.sample_id):
        if not raw.prompt or not raw.prompt.strip():
            rejected.append((raw.sample_id, "missing_prompt"))
            continue
        grid = grid_for(raw)
        if grid is None:
            rejected.append((raw.sample_id, "missing_grid"))
            continue
        ego = to_ego_frame(raw)
        if not filter_center_range(ego.box, pc_range):
            rejected.append((raw.sample_id, "center_out_of_range"))
            continue
        if not filter_has_occupied(grid, ego.box):
            rejected.append((raw.sample_id, "no_occupied_voxels"))
            continue

        scene = [
            (b, c)
            for b, c in ego.annotations
            if not filter_annotations
            or (filter_center_range(b, pc_range) and filter_has_occupied(grid, b))
        ]
        if not any(c == raw.category and _same_box(b, ego.box) for b, c in scene):
            scene.append((ego.box, raw.category))
        n_same = sum(1 for _, c in scene if c == raw.category)
        samples.append(
            GroundingSample(
                sample_id=raw.sample_id,
                prompt=raw.prompt,
                box=ego.box,
                category=raw.category,
                is_unique=n_same == 1,
                grid_ref=raw.grid_source or raw.sample_id,
                all_boxes=scene,
                split=raw.split,
            )
        )

    splits: Dict[str, List[str]] = {}
    for s in samples:
        splits.setdefault(s.split, []).append(s.sample_id)
    used = {s.grid_ref for s in samples}
    grids = {k: g for k, g in grids.items() if k in used}
    return samples, DatasetManifest(splits, rejected), grids


@dataclass
class ClassStats:
    count: int
    mean_voxels: float

    @property
    def mean_display(self) -> int:
        # round half up
        return int(math.floor(self.mean_voxels + 0.5))


def compute_statistics(
    samples: Sequence[GroundingSample], grids: Mapping[str, OccupancyGrid]
) -> Dict[int, ClassStats]:
    """Referent count and mean ground-truth voxel count per class id."""
    sizes: Dict[int, List[int]] = {}
    for s in samples:
        n = len(extract_gt_occupancy(grids[s.grid_ref], s.box))
        sizes.setdefault(int(s.category), []).append(n)
    return {c: ClassStats(len(v), sum(v) / len(v)) for c, v in sorted(sizes.items())}


def statistics_table(stats: Mapping[int, ClassStats], names: Optional[Mapping[int, str]] = None) -> str:
    names = names or {}
    cols = [names.get(c, str(c)) for c in stats]
    rows = [
        ["Objects"] + cols,
        ["Object Number"] + [str(s.count) for s in stats.values()],
        ["Average Voxel Number"] + [str(s.mean_display) for s in stats.values()],
    ]
    width = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(c.ljust(width[i]) if i == 0 else c.rjust(width[i]) for i, c in enumerate(r))
        for r in rows
    )


# -- directory layouts ------------------------------------------------------

def _grid_loader(path: Path, meta: GridMeta, fill_label: int) -> Callable[[], OccupancyGrid]:
    def load() -> OccupancyGrid:
        if path.suffix == ".npz":
            with np.load(path) as z:
                labels = z["labels"] if "labels" in z.files else None
                return voxelize(PointCloud(z["points"], labels), meta, fill_label)
        return read_grid(path)

    return load


def _annotation_box(obj, where: str) -> Tuple[Box3D, int]:
    if "category" not in obj:
        raise FormatError(f"{where}: missing required field 'category'")
    return box_from_json(obj, where), int(obj["category"])


def load_raw_index(
    raw_dir,
    meta: Optional[GridMeta] = None,
    fill_label: int = 1,
) -> List[RawSample]:
    """Parse ``raw_dir/index.json``; raises FormatError / OSError on a bad index."""
    raw_dir = Path(raw_dir)
    meta = meta or GridMeta.canonical()
    index = raw_dir / "index.json"
    if not index.exists():
        return []
    obj = json.loads(index.read_text(encoding="utf-8"))
    if not isinstance(obj, Mapping) or obj.get("version") != 1:
        raise FormatError(f"{index}: unsupported raw index version")
    raws = []
    for n, rec in enumerate(obj.get("samples", [])):
        where = f"{index}: sample {n}"
        for key in ("sample_id", "box", "category"):
            if key not in rec:
                raise FormatError(f"{where}: missing required field '{key}'")
        src = rec.get("grid_file") or rec.get("points_file")
        to_ego = RigidTransform(np.asarray(rec["to_ego"])) if "to_ego" in rec else RigidTransform.identity()
        raws.append(
            RawSample(
                sample_id=str(rec["sample_id"]),
                prompt=rec.get("prompt"),
                box=box_from_json(rec["box"], where),
                category=int(rec["category"]),
                to_ego=to_ego,
                grid_source=src,
                load_grid=_grid_loader(raw_dir / src, meta, fill_label) if src else None,
                annotations=[
                    _annotation_box(a, f"{where} annotation {i}")
                    for i, a in enumerate(rec.get("annotations", []))
                ],
                split=str(rec.get("split", "train")),
            )
        )
    return raws


def grid_file_name(grid_source: str) -> str:
    stem = Path(grid_source).with_suffix("").as_posix().replace("/", "__")
    return f"grids/{stem}.occg"


def write_dataset(out_dir, samples: Sequence[GroundingSample], manifest: DatasetManifest,
                  grids: Mapping[str, OccupancyGrid]) -> None:
    out_dir = Path(out_dir)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    names = {ref: grid_file_name(ref) for ref in grids}
    for ref, grid in sorted(grids.items()):
        write_grid(out_dir / names[ref], grid, sparse=True)
    stored = [replace(s, grid_ref=names[s.grid_ref]) for s in samples]
    write_annotations(out_dir / "annotations.json", stored)
    write_json(out_dir / "manifest.json", manifest.to_dict())


class GridStore(Mapping):
    """Lazy, caching ``grid_file -> OccupancyGrid`` view of a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: Dict[str, OccupancyGrid] = {}

    def __getitem__(self, key: str) -> OccupancyGrid:
        if key not in self._cache:
            self._cache[key] = read_grid(self.root / key)
        return self._cache[key]

    def __iter__(self):
        return iter(sorted(p.relative_to(self.root).as_posix() for p in (self.root / "grids").glob("*.occg")))

    def __len__(self):
        return sum(1 for _ in self)


def load_dataset(dataset_dir) -> Tuple[List[GroundingSample], GridStore]:
    dataset_dir = Path(dataset_dir)
    return read_annotations(dataset_dir / "annotations.json"), GridStore(dataset_dir)
