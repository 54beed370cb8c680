import json
import math
import struct

import numpy as np
import pytest

from occground.depthmap import CameraModel, DepthMap
from occground.formats import (
    FormatError,
    LabelMap,
    decode_depth,
    decode_grid,
    encode_depth,
    encode_grid,
    read_annotations,
    read_annotations_with_extra,
    read_camera,
    read_depth,
    read_grid,
    read_predictions,
    remap_labels,
    write_annotations,
    write_camera,
    write_depth,
    write_depth_png,
    write_grid,
    write_predictions,
)
from occground.geometry import Box3D, GridMeta, OccupancyGrid, RigidTransform
from occground.grounding import GroundingPrediction, GroundingSample

from conftest import random_grid, random_rigid


def test_dense_header_size():
    g = OccupancyGrid.empty(GridMeta((2, 2, 2), (0, 0, 0), 1.0))
    data = encode_grid(g)
    assert len(data) == 4 + 2 + 1 + 12 + 24 + 24 + 8 == 75
    assert data[:4] == b"OCCG"
    assert struct.unpack_from("<HB", data, 4) == (1, 0)


def test_sparse_layout():
    labels = np.zeros((3, 2, 2), dtype=np.uint8)
    labels[2, 1, 0] = 17
    data = encode_grid(OccupancyGrid(GridMeta((3, 2, 2), (0, 0, 0), 1.0), labels), sparse=True)
    assert len(data) == 67 + 8 + 13
    assert struct.unpack_from("<Q3IB", data, 67) == (1, 2, 1, 0, 17)


def test_grid_round_trips(rng, tmp_path):
    path = tmp_path / "g.occg"
    for n in range(1000):
        g = random_grid(rng, max_dim=8)
        sparse = bool(n % 2)
        data = encode_grid(g, sparse)
        back = decode_grid(data)
        assert back == g
        assert encode_grid(back, sparse) == data
        if n % 100 == 0:
            write_grid(path, g, sparse)
            assert read_grid(path) == g


def test_sparse_and_dense_agree(rng):
    for _ in range(50):
        g = random_grid(rng, max_dim=16)
        assert decode_grid(encode_grid(g, True)) == decode_grid(encode_grid(g, False))


def test_grid_decode_errors():
    g = OccupancyGrid.empty(GridMeta((2, 2, 2), (0, 0, 0), 1.0))
    data = encode_grid(g)
    with pytest.raises(FormatError, match="magic"):
        decode_grid(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        decode_grid(data[:4] + struct.pack("<H", 2) + data[6:])
    with pytest.raises(FormatError, match="length"):
        decode_grid(data[:-1])
    with pytest.raises(FormatError, match="length"):
        decode_grid(data + b"\0")
    sparse = bytearray(encode_grid(g, True)[:67]) + struct.pack("<Q3IB", 1, 0, 2, 0, 4)
    with pytest.raises(FormatError, match="out of dims"):
        decode_grid(bytes(sparse))


def test_depth_round_trips(rng, tmp_path):
    d = DepthMap(np.array([[5.0]]))
    data = encode_depth(d)
    assert len(data) == 14 + 4
    assert decode_depth(data).values[0, 0] == 5.0
    for n in range(1000):
        h, w = (int(x) for x in rng.integers(1, 20, 2))
        vals = rng.uniform(0, 100, (h, w)).astype(np.float32)
        vals[rng.random((h, w)) < 0.3] = 0.0
        d = DepthMap(vals)
        data = encode_depth(d)
        back = decode_depth(data)
        assert back == d and encode_depth(back) == data
    write_depth(tmp_path / "d.dmap", d)
    assert read_depth(tmp_path / "d.dmap") == d


def test_depth_nan_rejected():
    data = bytearray(encode_depth(DepthMap(np.array([[1.0, 2.0]]))))
    data[14:18] = struct.pack("<f", float("nan"))
    with pytest.raises(FormatError, match="non-finite depth"):
        decode_depth(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        decode_depth(b"DMAX" + bytes(data[4:]))


def test_depth_png(tmp_path):
    from PIL import Image

    d = DepthMap(np.array([[0.0, 1.5], [2.0, 300.0]]))
    write_depth_png(tmp_path / "d.png", d)
    img = np.array(Image.open(tmp_path / "d.png"))
    assert img.tolist() == [[0, 384], [512, 65535]]


def random_sample(rng, n) -> GroundingSample:
    def box():
        return Box3D(tuple(rng.uniform(-40, 40, 3)), tuple(rng.uniform(0.1, 10, 3)), rng.uniform(-10, 10))

    b = box()
    others = [(box(), int(rng.integers(1, 20))) for _ in range(int(rng.integers(0, 4)))]
    extra = {"token": f"t{n}", "meta": {"k": [1, 2]}} if n % 3 == 0 else {}
    return GroundingSample(f"s{n:04d}", f"prompt {n} é", b, int(rng.integers(1, 20)),
                           bool(rng.integers(2)), f"grids/g{n % 7}.occg", [(b, 3)] + others,
                           "train" if n % 2 else "val", extra)


def test_annotation_round_trips(rng, tmp_path):
    samples = [random_sample(rng, n) for n in range(1000)]
    path = tmp_path / "a.json"
    write_annotations(path, samples, {"source": "fixture"})
    back, extra = read_annotations_with_extra(path)
    assert back == samples
    assert extra == {"source": "fixture"}
    first = path.read_bytes()
    write_annotations(path, back, extra)
    assert path.read_bytes() == first


def minimal(**box):
    b = {"center": [1, 2, 0], "size": [4, 2, 1.5], "yaw": 0.0}
    b.update(box)
    return {"version": 1, "samples": [{"sample_id": "a", "prompt": "the red car", "box": b, "category": 4,
                                       "is_unique": True, "grid_file": "grids/a.occg", "all_boxes": [],
                                       "split": "val"}]}


def test_annotation_yaw_normalized(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps(minimal(yaw=3 * math.pi / 2)))
    (s,) = read_annotations(path)
    assert s.box.yaw == pytest.approx(-math.pi / 2)
    write_annotations(path, [s])
    assert json.loads(path.read_text())["samples"][0]["box"]["yaw"] == pytest.approx(-math.pi / 2)


def test_annotation_errors(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps(minimal(size=[4, 0, 1])))
    with pytest.raises(FormatError, match="non-positive box size"):
        read_annotations(path)
    obj = minimal()
    del obj["samples"][0]["category"]
    path.write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="sample 0: missing required field 'category'"):
        read_annotations(path)
    obj = minimal()
    obj["version"] = 2
    path.write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="version"):
        read_annotations(path)


def test_predictions_round_trip(tmp_path):
    preds = [GroundingPrediction("b", frozenset({(1, 2, 3), (0, 0, 0)}), Box3D((1, 1, 1), (1, 1, 1), 0.5)),
             GroundingPrediction("a", frozenset())]
    write_predictions(tmp_path / "p.json", preds)
    back = read_predictions(tmp_path / "p.json")
    assert sorted(back, key=lambda p: p.sample_id) == sorted(preds, key=lambda p: p.sample_id)
    rec = json.loads((tmp_path / "p.json").read_text())["predictions"][1]
    assert rec["voxels"] == [[0, 0, 0], [1, 2, 3]]


def test_camera_round_trip(rng, tmp_path):
    cam = CameraModel.from_params(1266.4, 1266.4, 816.3, 491.5, 1600, 900, random_rigid(rng))
    write_camera(tmp_path / "c.json", cam)
    back = read_camera(tmp_path / "c.json")
    assert np.array_equal(back.K, cam.K) and back.camera_to_ego == cam.camera_to_ego
    assert (back.width, back.height) == (1600, 900)


def test_remap_labels():
    meta = GridMeta((2, 1, 1), (0, 0, 0), 1.0)
    g = OccupancyGrid(meta, np.array([0, 17], dtype=np.uint8))
    assert remap_labels(g, LabelMap.identity()) == g
    out = remap_labels(g, LabelMap({17: 0, 0: 1}))
    assert out.labels.ravel().tolist() == [1, 0]
    g99 = OccupancyGrid(meta, np.array([0, 99], dtype=np.uint8))
    with pytest.raises(ValueError, match="unmapped label 99"):
        remap_labels(g99, LabelMap({17: 0, 0: 1}))


def test_label_map_validation():
    with pytest.raises(ValueError, match="exactly one"):
        LabelMap({1: 2, 3: 4})
    with pytest.raises(ValueError, match="exactly one"):
        LabelMap({1: 0, 2: 0})
    with pytest.raises(ValueError, match="merge"):
        LabelMap({17: 0, 1: 5, 2: 5})
    assert LabelMap({17: 0, 1: 5, 2: 5}, merges={5}).table[2] == 5
    assert LabelMap.from_json({"table": {"17": 0, "4": 4}}).table == {17: 0, 4: 4}
