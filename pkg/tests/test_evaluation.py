"""IoU and the single-proposal AP protocol."""

from __future__ import annotations

import pytest

from compdet.boxes import BoundingBox
from compdet.data import DatasetRecord
from compdet.errors import DataError, GeometryError
from compdet.evaluation import EvalReport, evaluate, iou


def _box(x0, y0, x1, y1, cid=0, score=0.0):
    return BoundingBox(x0, y0, x1, y1, class_id=cid, score=score)


def _rec(i, box, fg="L0", bg="L0"):
    return DatasetRecord(image_id=f"img_{i}", path=f"images/img_{i}.png",
                         class_id=box.class_id, box=box, fg_level=fg, bg_level=bg)


def test_iou_identical_and_disjoint():
    a = _box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, _box(20, 20, 30, 30)) == 0.0


def test_iou_hand_case_one_seventh():
    assert iou(_box(0, 0, 2, 2), _box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)


def test_bounding_box_rejects_degenerate():
    with pytest.raises(GeometryError):
        BoundingBox(5.0, 0.0, 5.0, 10.0)


def test_evaluate_perfect_detector():
    records = [_rec(i, _box(0, 0, 10, 10, cid=i % 2)) for i in range(4)]
    detections = {r.image_id: [r.box] for r in records}
    report = evaluate(records, detections)
    assert report.cells == {("L0", "L0"): 100.0}
    assert report.mean == 100.0


def test_evaluate_empty_outputs():
    records = [_rec(i, _box(0, 0, 10, 10)) for i in range(3)]
    report = evaluate(records, {r.image_id: [] for r in records})
    assert report.cells == {("L0", "L0"): 0.0}


def test_evaluate_five_image_fixture_sixty_percent():
    gt = _box(10, 10, 30, 30)
    records = [_rec(i, gt) for i in range(5)]
    hit = _box(11, 11, 31, 31, score=1.0)        # IoU well above 0.5
    miss = _box(60, 60, 80, 80, score=1.0)       # disjoint
    detections = {
        "img_0": [hit], "img_1": [hit], "img_2": [hit],
        "img_3": [miss], "img_4": [miss],
    }
    report = evaluate(records, detections)
    assert report.cells[("L0", "L0")] == pytest.approx(60.0)


def test_evaluate_uses_only_best_scored_same_class_proposal():
    gt = _box(10, 10, 30, 30, cid=1)
    records = [_rec(0, gt)]
    good_low = _box(10, 10, 30, 30, cid=1, score=0.1)
    bad_high = _box(60, 60, 80, 80, cid=1, score=9.0)
    other_class = _box(10, 10, 30, 30, cid=0, score=99.0)
    report = evaluate(records, {"img_0": [good_low, bad_high, other_class]})
    assert report.cells[("L0", "L0")] == 0.0  # highest same-class proposal misses


def test_evaluate_order_invariant():
    gt = _box(10, 10, 30, 30)
    records = [_rec(0, gt)]
    dets = [_box(10, 10, 30, 30, score=2.0), _box(40, 40, 60, 60, score=1.0)]
    a = evaluate(records, {"img_0": dets})
    b = evaluate(records, {"img_0": list(reversed(dets))})
    assert a.cells == b.cells


def test_evaluate_missing_records_listed():
    records = [_rec(i, _box(0, 0, 10, 10)) for i in range(2)]
    with pytest.raises(DataError, match="img_1"):
        evaluate(records, {"img_0": []})


def test_report_cells_split_by_level():
    records = [_rec(0, _box(0, 0, 10, 10), fg="L0", bg="L0"),
               _rec(1, _box(0, 0, 10, 10), fg="L2", bg="L2")]
    detections = {"img_0": [records[0].box], "img_1": []}
    report = evaluate(records, detections)
    assert report.cells[("L0", "L0")] == 100.0
    assert report.cells[("L2", "L2")] == 0.0
    assert report.mean == pytest.approx(50.0)


def test_report_csv_format(tmp_path):
    report = EvalReport(cells={("L0", "L0"): 87.5}, counts={("L0", "L0"): 8})
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "fg_level,bg_level,ap,count"
    assert lines[1] == "L0,L0,87.5000,8"
    assert lines[2].startswith("mean,-,87.5000")
    assert "87.50" in report.table()
