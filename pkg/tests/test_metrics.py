import json

import numpy as np
import pytest

from featseg.autodiff import ShapeError
from featseg.metrics import (accumulate_confusion, compute_fg_iou, compute_miou,
                             load_manifest)


def naive_iou(pred, gt, num_classes):
    """Set-based per-class IoU over raw pixel lists."""
    ious = []
    for k in range(num_classes):
        p = {i for i, v in enumerate(pred.reshape(-1)) if v == k}
        g = {i for i, v in enumerate(gt.reshape(-1)) if v == k}
        union = p | g
        ious.append(len(p & g) / len(union) if union else np.nan)
    return np.array(ious)


def test_worked_two_class_case():
    # 2x2: pred [[0,1],[1,1]], gt [[0,0],[1,1]]
    # class 0: inter 1, union 2 -> 1/2; class 1: inter 2, union 3 -> 2/3
    # mIoU = (1/2 + 2/3) / 2 = 7/12
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 0], [1, 1]])
    conf = accumulate_confusion(pred, gt, 2)
    rep = compute_miou(conf, ["a", "b"])
    assert np.isclose(rep.iou[0], 0.5)
    assert np.isclose(rep.iou[1], 2 / 3)
    assert np.isclose(rep.miou, 7 / 12)
    assert rep.pixel_count == 4


def test_matches_naive_oracle_many_cases():
    rng = np.random.default_rng(0)
    for _ in range(30):
        K = int(rng.integers(2, 6))
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        pred = rng.integers(0, K, shape)
        gt = rng.integers(0, K, shape)
        rep = compute_miou(accumulate_confusion(pred, gt, K))
        want = naive_iou(pred, gt, K)
        assert np.allclose(rep.iou, want, equal_nan=True)
        assert np.isclose(rep.miou, np.nanmean(want))


def test_absent_class_excluded_from_mean():
    pred = np.array([[0, 0], [0, 0]])
    gt = np.array([[0, 0], [0, 0]])
    rep = compute_miou(accumulate_confusion(pred, gt, 3))
    assert np.isnan(rep.iou[1]) and np.isnan(rep.iou[2])
    assert rep.miou == 1.0


def test_accumulation_is_order_independent():
    rng = np.random.default_rng(1)
    frames = [(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))) for _ in range(5)]
    a = None
    for p, g in frames:
        a = accumulate_confusion(p, g, 3, a)
    b = None
    for p, g in reversed(frames):
        b = accumulate_confusion(p, g, 3, b)
    assert np.array_equal(a, b)
    # Same result as one concatenated frame.
    cat_p = np.concatenate([p.reshape(-1) for p, _ in frames])
    cat_g = np.concatenate([g.reshape(-1) for _, g in frames])
    assert np.array_equal(a, accumulate_confusion(cat_p, cat_g, 3))


def test_confusion_input_validation():
    with pytest.raises(ShapeError):
        accumulate_confusion(np.zeros((2, 2)), np.zeros((2, 3)), 2)
    with pytest.raises(ValueError):
        accumulate_confusion(np.array([[5]]), np.array([[0]]), 2)
    with pytest.raises(ValueError):
        compute_miou(np.zeros((2, 2), np.int64))
    with pytest.raises(ShapeError):
        compute_miou(np.zeros((2, 3), np.int64))


def test_fg_iou():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 0], [1, 1]])
    conf = accumulate_confusion(pred, gt, 2)
    assert np.isclose(compute_fg_iou(conf, 1), 2 / 3)
    empty = np.zeros((3, 3), np.int64)
    empty[0, 0] = 4
    assert compute_fg_iou(empty, 2) is None
    with pytest.raises(ValueError):
        compute_fg_iou(conf, 5)


def test_report_serialization(tmp_path):
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 0], [1, 1]])
    rep = compute_miou(accumulate_confusion(pred, gt, 3), ["a", "b", "c"])
    rep.write_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert np.isclose(data["miou"], 7 / 12)
    assert data["per_class"][2]["iou"] is None
    assert data["per_class"][0]["name"] == "a"


def test_load_manifest(tmp_path):
    from featseg.images import write_pgm, write_ppm
    write_ppm(tmp_path / "img0.ppm", np.zeros((8, 8, 3), np.float32))
    write_pgm(tmp_path / "img0.pgm", np.zeros((8, 8), np.uint8))
    manifest = {"classes": ["bg", {"name": "building", "subclasses": ["building", "roof"]}],
                "entries": [{"image": "img0.ppm", "mask": "img0.pgm"}]}
    with open(tmp_path / "m.json", "w") as f:
        json.dump(manifest, f)
    classes, entries = load_manifest(tmp_path / "m.json")
    assert classes[0] == {"name": "bg", "subclasses": ["bg"]}
    assert classes[1]["subclasses"] == ["building", "roof"]
    assert entries[0]["image"].is_file()


def test_load_manifest_missing_file(tmp_path):
    with open(tmp_path / "m.json", "w") as f:
        json.dump({"classes": ["a"], "entries": [{"image": "no.ppm", "mask": "no.pgm"}]}, f)
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "m.json")
