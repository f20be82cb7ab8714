import math
import pathlib

import numpy as np
import pytest

import pvl

ROOT = pathlib.Path(__file__).resolve().parents[2]
DESK = str(ROOT / "configs" / "desk.cfg")


def test_iou_identical_and_disjoint():
    box = [0, 0, 0, 4, 2, 1.5, 0.3]
    assert pvl.bev_iou(box, box) == pytest.approx(1.0)
    assert pvl.iou_3d(box, box) == pytest.approx(1.0)
    assert pvl.bev_iou(box, [50, 0, 0, 4, 2, 1.5, 0]) == 0.0


def test_iou_half_overlap():
    # two unit-height squares offset by half a side share a third of the union
    a = [0, 0, 0, 2, 2, 1, 0]
    b = [1, 0, 0, 2, 2, 1, 0]
    assert pvl.bev_iou(a, b) == pytest.approx(1 / 3)


def test_bad_box_raises():
    with pytest.raises(pvl.ValidationError):
        pvl.bev_iou([0, 0, 0], [0, 0, 0, 1, 1, 1, 0])


def test_nms_keeps_best_of_overlapping():
    boxes = np.array([[0, 0, 0, 4, 2, 1.5, 0], [0.1, 0, 0, 4, 2, 1.5, 0], [20, 0, 0, 4, 2, 1.5, 0]])
    assert pvl.nms(boxes, [0.5, 0.9, 0.3], 0.5) == [1, 2]


def test_fps_starts_at_zero_and_is_distinct():
    pts = np.random.default_rng(4).uniform(-5, 5, size=(64, 3))
    idx = pvl.fps(pts, 16)
    assert idx[0] == 0 and len(set(idx)) == 16


def test_codec_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        anchor = [*rng.uniform(-10, 10, 3), *rng.uniform(1, 4, 3), rng.uniform(-math.pi, math.pi)]
        gt = [*rng.uniform(-10, 10, 3), *rng.uniform(1, 4, 3), rng.uniform(-math.pi, math.pi)]
        back = pvl.decode_residual(pvl.encode_residual(gt, anchor), anchor)
        assert np.allclose(back[:6], gt[:6], atol=1e-9)
        d = (back[6] - gt[6] + math.pi) % (2 * math.pi) - math.pi
        assert abs(d) < 1e-9


def test_confidence_target_anchors():
    assert pvl.confidence_target(0.25) == 0.0
    assert pvl.confidence_target(0.5) == 0.5
    assert pvl.confidence_target(0.75) == 1.0


def test_average_precision_mixed():
    # one hit then one miss against two gts: precision 1 up to recall 0.5, nothing beyond
    assert pvl.average_precision([True, False], [0.9, 0.8], 2, "R11") == pytest.approx(6 / 11)
    assert pvl.average_precision([True, False], [0.9, 0.8], 2, "R40") == pytest.approx(0.5)
    # a second hit at precision 2/3 fills the upper recall points
    tp, scores = [True, False, True], [0.9, 0.8, 0.7]
    assert pvl.average_precision(tp, scores, 2, "R11") == pytest.approx((6 + 5 * 2 / 3) / 11)
    assert pvl.average_precision(tp, scores, 2, "R40") == pytest.approx((20 + 20 * 2 / 3) / 40)


def test_gen_scene_is_deterministic_and_points_lie_in_boxes():
    a = pvl.gen_scene(0, DESK)
    b = pvl.gen_scene(0, DESK)
    assert np.array_equal(a["points"], b["points"])
    assert a["points"].shape[1] == 4 and a["boxes"].shape[1] == 7
    assert len(a["classes"]) == len(a["boxes"])
    inside = sum(sum(pvl.points_in_box(a["points"][:, :3], list(box))) for box in a["boxes"])
    assert inside > 0


def test_detect_returns_scored_boxes():
    r = pvl.detect(0, DESK)
    assert r["boxes"].shape == (len(r["scores"]), 7)
    assert all(0.0 <= s <= 1.0 for s in r["scores"])


def test_cli_help_and_bad_command():
    code, out, _ = pvl.cli(["--help"])
    assert code == 0 and "synth" in out
    code, _, err = pvl.cli(["no-such-command"])
    assert code != 0 and err
