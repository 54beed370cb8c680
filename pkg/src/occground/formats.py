"""File formats: OCCG grids, DMAP depth maps, JSON annotations / predictions / reports.

Binary formats are little-endian and fixed width:

OCCG  magic ``b"OCCG"``, u16 version (1), u8 mode (0 dense, 1 sparse),
      3 x u32 dims, 3 x f64 origin, 3 x f64 voxel size, then either
      nx*ny*nz label bytes (x-major) or a u64 record count followed by
      records of 3 x u32 index + u8 label.
DMAP  magic ``b"DMAP"``, u16 version (1), u32 width, u32 height, then
      width*height f32 depths, row-major.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .depthmap import CameraModel, DepthMap
from .geometry import Box3D, GridMeta, OccupancyGrid, RigidTransform, voxels_from_array, voxels_to_array
from .grounding import GroundingPrediction, GroundingSample

OCCG_MAGIC = b"OCCG"
DMAP_MAGIC = b"DMAP"
FORMAT_VERSION = 1
DENSE, SPARSE = 0, 1

_OCCG_HEADER = struct.Struct("<4sHB3I3d3d")
_DMAP_HEADER = struct.Struct("<4sHII")
_SPARSE_RECORD = np.dtype([("i", "<u4"), ("j", "<u4"), ("k", "<u4"), ("label", "u1")])

ANNOTATION_VERSION = 1


class FormatError(ValueError):
    """A file does not follow its declared format."""


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- OCCG -------------------------------------------------------------------

def encode_grid(grid: OccupancyGrid, sparse: bool = False) -> bytes:
    m = grid.meta
    header = _OCCG_HEADER.pack(
        OCCG_MAGIC, FORMAT_VERSION, SPARSE if sparse else DENSE, *m.dims, *m.origin, *m.voxel_size
    )
    if not sparse:
        return header + grid.labels.tobytes(order="C")
    idx = np.argwhere(grid.labels != 0)
    rec = np.zeros(len(idx), dtype=_SPARSE_RECORD)
    rec["i"], rec["j"], rec["k"] = idx[:, 0], idx[:, 1], idx[:, 2]
    rec["label"] = grid.labels[idx[:, 0], idx[:, 1], idx[:, 2]]
    return header + struct.pack("<Q", len(rec)) + rec.tobytes()


def decode_grid(data: bytes) -> OccupancyGrid:
    if len(data) < _OCCG_HEADER.size:
        raise FormatError("truncated OCCG header")
    magic, version, mode, *rest = _OCCG_HEADER.unpack_from(data)
    if magic != OCCG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {OCCG_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported OCCG version {version}")
    try:
        meta = GridMeta(tuple(rest[0:3]), tuple(rest[3:6]), tuple(rest[6:9]))
    except ValueError as exc:
        raise FormatError(f"invalid grid header: {exc}") from exc
    payload = memoryview(data)[_OCCG_HEADER.size:]

    if mode == DENSE:
        if len(payload) != meta.num_voxels:
            raise FormatError(
                f"payload length mismatch: {len(payload)} bytes for {meta.num_voxels} voxels"
            )
        labels = np.frombuffer(payload, dtype=np.uint8).reshape(meta.dims).copy()
        return OccupancyGrid(meta, labels)

    if mode != SPARSE:
        raise FormatError(f"unknown OCCG mode {mode}")
    if len(payload) < 8:
        raise FormatError("payload length mismatch: missing sparse record count")
    (count,) = struct.unpack_from("<Q", payload)
    body = payload[8:]
    if len(body) != count * _SPARSE_RECORD.itemsize:
        raise FormatError(
            f"payload length mismatch: {len(body)} bytes for {count} sparse records"
        )
    rec = np.frombuffer(body, dtype=_SPARSE_RECORD)
    idx = np.stack([rec["i"], rec["j"], rec["k"]], axis=1).astype(np.int64)
    if len(idx) and np.any(idx >= np.asarray(meta.dims)):
        bad = idx[np.any(idx >= np.asarray(meta.dims), axis=1)][0]
        raise FormatError(f"sparse index {tuple(bad.tolist())} out of dims {meta.dims}")
    labels = np.zeros(meta.dims, dtype=np.uint8)
    if len(idx):
        flat = np.ravel_multi_index(idx.T, meta.dims)
        if len(np.unique(flat)) != len(flat):
            raise FormatError("duplicate sparse index")
        labels.reshape(-1)[flat] = rec["label"]
    return OccupancyGrid(meta, labels)


def write_grid(path, grid: OccupancyGrid, sparse: bool = False) -> None:
    _atomic_write(path, encode_grid(grid, sparse))


def read_grid(path) -> OccupancyGrid:
    return decode_grid(Path(path).read_bytes())


# -- DMAP -------------------------------------------------------------------

def encode_depth(depth: DepthMap) -> bytes:
    header = _DMAP_HEADER.pack(DMAP_MAGIC, FORMAT_VERSION, depth.width, depth.height)
    return header + depth.values.astype("<f4").tobytes(order="C")


def decode_depth(data: bytes) -> DepthMap:
    if len(data) < _DMAP_HEADER.size:
        raise FormatError("truncated DMAP header")
    magic, version, width, height = _DMAP_HEADER.unpack_from(data)
    if magic != DMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DMAP_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported DMAP version {version}")
    if width < 1 or height < 1:
        raise FormatError(f"invalid depth map size {width}x{height}")
    payload = data[_DMAP_HEADER.size:]
    if len(payload) != 4 * width * height:
        raise FormatError(f"payload length mismatch: {len(payload)} bytes for {width}x{height}")
    vals = np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float32)
    if not np.all(np.isfinite(vals)):
        raise FormatError("non-finite depth")
    if np.any(vals < 0):
        raise FormatError("negative depth")
    return DepthMap(vals)


def write_depth(path, depth: DepthMap) -> None:
    _atomic_write(path, encode_depth(depth))


def read_depth(path) -> DepthMap:
    return decode_depth(Path(path).read_bytes())


def write_depth_png(path, depth: DepthMap) -> None:
    """16-bit grayscale preview, 1/256 m per count, 0 = invalid."""
    from PIL import Image

    Image.fromarray(depth.to_uint16()).save(path)


# -- label maps -------------------------------------------------------------

@dataclass(frozen=True)
class LabelMap:
    """Source label -> canonical label; exactly one source label becomes free (0).

    Several sources may share a target only if that target is listed in
    ``merges``.
    """

    table: Mapping[int, int]
    merges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        table = {int(k): int(v) for k, v in self.table.items()}
        for k, v in table.items():
            if not (0 <= k <= 255 and 0 <= v <= 255):
                raise ValueError(f"label mapping {k}->{v} outside 0..255")
        free_sources = [k for k, v in table.items() if v == 0]
        if len(free_sources) != 1:
            raise ValueError(
                f"label map must send exactly one source label to free (0), got {sorted(free_sources)}"
            )
        merges = frozenset(int(m) for m in self.merges)
        seen: Dict[int, int] = {}
        for k, v in sorted(table.items()):
            if v in seen and v not in merges:
                raise ValueError(f"labels {seen[v]} and {k} both map to {v} without a declared merge")
            seen.setdefault(v, k)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "merges", merges)

    @classmethod
    def identity(cls, labels: Iterable[int] = range(256)) -> "LabelMap":
        return cls({int(l): int(l) for l in labels})

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "LabelMap":
        table = obj.get("table", obj)
        return cls({int(k): int(v) for k, v in table.items()}, frozenset(obj.get("merges", ())))


def remap_labels(grid: OccupancyGrid, label_map: LabelMap) -> OccupancyGrid:
    lut = np.full(256, -1, dtype=np.int16)
    for k, v in label_map.table.items():
        lut[k] = v
    out = lut[grid.labels]
    if np.any(out < 0):
        bad = sorted(set(np.unique(grid.labels[out < 0]).tolist()))
        raise ValueError("unmapped label " + ", ".join(str(b) for b in bad))
    return OccupancyGrid(grid.meta, out.astype(np.uint8))


# -- JSON -------------------------------------------------------------------

def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    _atomic_write(path, dump_json(obj).encode("utf-8"))


def box_to_json(box: Box3D) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw}


def box_from_json(obj, where: str) -> Box3D:
    if not isinstance(obj, Mapping):
        raise FormatError(f"{where}: box must be an object")
    for key in ("center", "size", "yaw"):
        if key not in obj:
            raise FormatError(f"{where}: missing required field 'box.{key}'")
    try:
        center = [float(x) for x in obj["center"]]
        size = [float(x) for x in obj["size"]]
        yaw = float(obj["yaw"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed box: {exc}") from exc
    if len(center) != 3 or len(size) != 3:
        raise FormatError(f"{where}: box center and size need 3 components")
    if any(s <= 0 for s in size):
        raise FormatError(f"{where}: non-positive box size")
    try:
        return Box3D(tuple(center), tuple(size), yaw)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc


_SAMPLE_FIELDS = ("sample_id", "prompt", "box", "category", "is_unique", "grid_file", "all_boxes", "split")


def sample_to_json(s: GroundingSample) -> dict:
    out = dict(s.extra)
    out.update(
        sample_id=s.sample_id,
        prompt=s.prompt,
        box=box_to_json(s.box),
        category=int(s.category),
        is_unique=bool(s.is_unique),
        grid_file=s.grid_ref,
        all_boxes=[dict(box_to_json(b), category=int(c)) for b, c in s.all_boxes],
        split=s.split,
    )
    return out


def sample_from_json(obj, index: int) -> GroundingSample:
    where = f"sample {index}"
    if not isinstance(obj, Mapping):
        raise FormatError(f"{where}: expected an object")
    for key in _SAMPLE_FIELDS:
        if key not in obj:
            raise FormatError(f"{where}: missing required field '{key}'")
    all_boxes = []
    for n, b in enumerate(obj["all_boxes"]):
        if not isinstance(b, Mapping) or "category" not in b:
            raise FormatError(f"{where}: missing required field 'all_boxes[{n}].category'")
        all_boxes.append((box_from_json(b, f"{where} all_boxes[{n}]"), int(b["category"])))
    return GroundingSample(
        sample_id=str(obj["sample_id"]),
        prompt=str(obj["prompt"]),
        box=box_from_json(obj["box"], where),
        category=int(obj["category"]),
        is_unique=bool(obj["is_unique"]),
        grid_ref=str(obj["grid_file"]),
        all_boxes=all_boxes,
        split=str(obj["split"]),
        extra={k: v for k, v in obj.items() if k not in _SAMPLE_FIELDS},
    )


def annotations_to_json(samples: Sequence[GroundingSample], extra: Optional[dict] = None) -> dict:
    out = dict(extra or {})
    out["version"] = ANNOTATION_VERSION
    out["samples"] = [sample_to_json(s) for s in samples]
    return out


def annotations_from_json(obj) -> Tuple[List[GroundingSample], dict]:
    if not isinstance(obj, Mapping):
        raise FormatError("annotation file must hold a JSON object")
    if obj.get("version") != ANNOTATION_VERSION:
        raise FormatError(f"unsupported annotation version {obj.get('version')!r}")
    if "samples" not in obj:
        raise FormatError("missing required field 'samples'")
    samples = [sample_from_json(s, i) for i, s in enumerate(obj["samples"])]
    extra = {k: v for k, v in obj.items() if k not in ("version", "samples")}
    return samples, extra


def write_annotations(path, samples: Sequence[GroundingSample], extra: Optional[dict] = None) -> None:
    write_json(path, annotations_to_json(samples, extra))


def read_annotations(path) -> List[GroundingSample]:
    return read_annotations_with_extra(path)[0]


def read_annotations_with_extra(path) -> Tuple[List[GroundingSample], dict]:
    return annotations_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def predictions_to_json(preds: Sequence[GroundingPrediction]) -> dict:
    out = []
    for p in sorted(preds, key=lambda p: p.sample_id):
        rec = {"sample_id": p.sample_id, "voxels": voxels_to_array(p.voxels).tolist()}
        if p.pred_box is not None:
            rec["pred_box"] = box_to_json(p.pred_box)
        out.append(rec)
    return {"version": ANNOTATION_VERSION, "predictions": out}


def predictions_from_json(obj) -> List[GroundingPrediction]:
    if not isinstance(obj, Mapping) or obj.get("version") != ANNOTATION_VERSION:
        raise FormatError("unsupported or missing prediction file version")
    if "predictions" not in obj:
        raise FormatError("missing required field 'predictions'")
    preds = []
    for i, rec in enumerate(obj["predictions"]):
        for key in ("sample_id", "voxels"):
            if key not in rec:
                raise FormatError(f"prediction {i}: missing required field '{key}'")
        vox = np.asarray(rec["voxels"], dtype=np.int64).reshape(-1, 3)
        if np.any(vox < 0):
            raise FormatError(f"prediction {i}: negative voxel index")
        box = box_from_json(rec["pred_box"], f"prediction {i}") if rec.get("pred_box") else None
        preds.append(GroundingPrediction(str(rec["sample_id"]), voxels_from_array(vox), box))
    return preds


def write_predictions(path, preds: Sequence[GroundingPrediction]) -> None:
    write_json(path, predictions_to_json(preds))


def read_predictions(path) -> List[GroundingPrediction]:
    return predictions_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def camera_to_json(cam: CameraModel) -> dict:
    return {
        "K": cam.K.tolist(),
        "camera_to_ego": cam.camera_to_ego.matrix.tolist(),
        "width": cam.width,
        "height": cam.height,
    }


def camera_from_json(obj) -> CameraModel:
    for key in ("K", "camera_to_ego", "width", "height"):
        if key not in obj:
            raise FormatError(f"camera: missing required field '{key}'")
    return CameraModel(np.asarray(obj["K"]), RigidTransform(np.asarray(obj["camera_to_ego"])),
                       int(obj["width"]), int(obj["height"]))


def read_camera(path) -> CameraModel:
    return camera_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_camera(path, cam: CameraModel) -> None:
    write_json(path, camera_to_json(cam))
