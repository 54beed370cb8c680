"""Command line entry points.

Exit codes: 0 success, 1 validation problems reported in the output,
2 hard I/O or format errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import dataset as ds
from . import depthmap, formats
from .geometry import CANONICAL_RANGE, CANONICAL_VOXEL_SIZE, GridMeta, RigidTransform
from .grounding import ALL_BOXES, BASELINES, SAME_CLASS
from .metrics import DEFAULT_THRESHOLDS, evaluate, format_table
from .voxelizer import PointCloud

logger = logging.getLogger("occground")

EXIT_OK, EXIT_INVALID, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


def _threshold(text: str) -> float:
    t = float(text)
    if not 0.0 < t < 1.0:
        raise argparse.ArgumentTypeError(f"threshold {text} not in (0, 1)")
    return t


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("worker count must be >= 1")
    return n


def _map_ordered(fn, items, workers: int):
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def cmd_build(args) -> int:
    meta = GridMeta.from_range(args.pc_range_m, args.voxel_size_m)
    try:
        raws = ds.load_raw_index(args.raw_dir, meta, args.fill_label)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read raw index in {args.raw_dir}: {exc}") from exc
    samples, manifest, grids = ds.build_dataset(
        raws, args.pc_range_m, filter_annotations=not args.raw_uniqueness
    )
    ds.write_dataset(args.out_dir, samples, manifest, grids)
    counts = manifest.to_dict()["split_counts"]
    print(f"accepted {manifest.accepted_count} / {len(raws)} samples")
    for split, n in counts.items():
        print(f"  {split}: {n}")
    for reason, n in manifest.rejection_counts.items():
        print(f"  rejected {reason}: {n}")
    return EXIT_OK


def cmd_eval(args) -> int:
    samples, grids = ds.load_dataset(args.dataset_dir)
    preds = formats.read_predictions(args.predictions)
    report = evaluate(samples, grids, preds, args.thresholds, workers=args.workers)
    if args.report:
        formats.write_json(args.report, report.to_dict())
    if args.json:
        sys.stdout.write(formats.dump_json(report.to_dict()))
    else:
        print(format_table(report, args.title))
    if report.missing or report.unmatched:
        print(
            f"warning: {len(report.missing)} samples without prediction, "
            f"{len(report.unmatched)} predictions for unknown samples",
            file=sys.stderr,
        )
        return EXIT_INVALID
    return EXIT_OK


def cmd_baseline(args) -> int:
    samples, grids = ds.load_dataset(args.dataset_dir)
    fn = BASELINES[args.method]
    preds = _map_ordered(
        lambda s: fn(s, grids[s.grid_ref], args.seed, args.candidates),
        sorted(samples, key=lambda s: s.sample_id),
        args.workers,
    )
    formats.write_predictions(args.out, preds)
    print(f"wrote {len(preds)} {args.method} predictions to {args.out}")
    return EXIT_OK


def _load_cloud(path: str):
    with np.load(path) as z:
        labels = z["labels"] if "labels" in z.files else None
        pose = RigidTransform(z["to_ego"]) if "to_ego" in z.files else RigidTransform.identity()
        return PointCloud(z["points"], labels), pose


def cmd_render(args) -> int:
    depthmap.set_workers(args.workers)
    cam = formats.read_camera(args.camera)
    if args.mode == "lidar":
        if not args.cloud:
            raise CliError("lidar mode needs at least one --cloud file")
        depth = depthmap.project_lidar_depth([_load_cloud(p) for p in args.cloud], cam)
    else:
        grid = formats.read_grid(args.grid)
        if args.mode == "exact":
            depth = depthmap.raycast_depth_exact(grid, cam, args.max_range_m)
        else:
            depth = depthmap.raycast_depth_fixed(grid, cam, args.step_m, args.max_range_m)
    formats.write_depth(args.out, depth)
    if args.png:
        formats.write_depth_png(args.png, depth)
    print(f"valid fraction {depth.valid_fraction():.6f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    samples, grids = ds.load_dataset(args.dataset_dir)
    stats = ds.compute_statistics(samples, grids)
    names = None
    if args.names:
        names = {int(k): v for k, v in json.loads(Path(args.names).read_text()).items()}
    if args.json:
        formats.write_json(
            args.json,
            {
                "version": 1,
                "classes": {
                    str(c): {"count": s.count, "mean_voxels": s.mean_voxels, "mean_display": s.mean_display}
                    for c, s in stats.items()
                },
                "total": sum(s.count for s in stats.values()),
            },
        )
    print(ds.statistics_table(stats, names))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occground", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    workers = dict(type=_positive_int, default=os.cpu_count() or 1, help="parallel workers")

    b = sub.add_parser("build", help="build the benchmark from a raw index directory")
    b.add_argument("raw_dir")
    b.add_argument("out_dir")
    b.add_argument("--pc-range-m", type=float, nargs=6, default=list(CANONICAL_RANGE),
                   metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    b.add_argument("--voxel-size-m", type=float, default=CANONICAL_VOXEL_SIZE)
    b.add_argument("--fill-label", type=int, default=1,
                   help="class id for voxelized clouds without per-point labels")
    b.add_argument("--raw-uniqueness", action="store_true",
                   help="count categories over all annotations instead of filtered ones")
    b.add_argument("--workers", **workers)
    b.set_defaults(func=cmd_build)

    e = sub.add_parser("eval", help="score a prediction file")
    e.add_argument("dataset_dir")
    e.add_argument("predictions")
    e.add_argument("--thresholds", type=_threshold, nargs="+", default=list(DEFAULT_THRESHOLDS))
    e.add_argument("--report", help="write the JSON report here")
    e.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    e.add_argument("--title", default="Method")
    e.add_argument("--workers", **workers)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("baseline", help="random GT-Rand / Box-Rand predictions")
    r.add_argument("dataset_dir")
    r.add_argument("--method", choices=sorted(BASELINES), required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--candidates", choices=[SAME_CLASS, ALL_BOXES], default=SAME_CLASS)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", **workers)
    r.set_defaults(func=cmd_baseline)

    d = sub.add_parser("render", help="render a depth map")
    d.add_argument("grid", help="OCCG grid (ignored in lidar mode, may be '-')")
    d.add_argument("camera", help="camera JSON: K, camera_to_ego, width, height")
    d.add_argument("--mode", choices=["exact", "fixed", "lidar"], default="exact")
    d.add_argument("--step-m", type=float, default=None,
                   help="fixed marching step (default: half the smallest voxel edge)")
    d.add_argument("--max-range-m", type=float, default=depthmap.DEFAULT_MAX_RANGE)
    d.add_argument("--cloud", action="append", default=[],
                   help=".npz with 'points' and optional 'to_ego' (repeat for multi-frame)")
    d.add_argument("--out", required=True)
    d.add_argument("--png", help="also write a 16-bit grayscale preview")
    d.add_argument("--workers", **workers)
    d.set_defaults(func=cmd_render)

    s = sub.add_parser("stats", help="per-class referent counts and mean voxels")
    s.add_argument("dataset_dir")
    s.add_argument("--json")
    s.add_argument("--names", help="JSON object mapping class id to display name")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        where = getattr(exc, "filename", None)
        msg = f"{where}: {exc}" if where and str(where) not in str(exc) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
