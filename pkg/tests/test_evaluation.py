import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hand_ap11, mc_rect_iou, rect
from voxfcn.evaluation import (
    DIFFICULTIES,
    FP,
    GROUND_PLANE,
    IGNORED,
    IMAGE_PLANE,
    TP,
    EvalConfig,
    Frame,
    average_precision,
    clip_polygon,
    difficulty_bin,
    evaluate,
    evaluate_all,
    ground_plane_polygon,
    iou_axis_aligned,
    iou_rotated,
    match_detections,
    polygon_area,
)
from voxfcn.inference import Detection
from voxfcn.voxel import OrientedBox3D, box_corners, box_to_label, label_to_box


def det_for(label, calib, score=1, objectness=0.9, shift=(0.0, 0.0), yaw_offset=0.0):
    box = label_to_box(label, calib)
    box = OrientedBox3D((box.center[0] + shift[0], box.center[1] + shift[1], box.center[2]),
                        box.size, box.yaw + yaw_offset)
    return Detection(box, box_corners(box), score, objectness)


def car(calib, x, y, cls="Car", yaw=0.0, occlusion=0, truncation=0.0):
    return box_to_label(OrientedBox3D((x, y, -0.9), (4.0, 1.8, 1.5), yaw), calib,
                        class_name=cls, occlusion=occlusion, truncation=truncation)


class TestGeometry:
    def test_axis_aligned_simple(self):
        assert iou_axis_aligned((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
        assert iou_axis_aligned((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_shoelace(self):
        assert polygon_area(rect(0, 0, 4, 2, 0.3)) == pytest.approx(8.0)
        assert polygon_area(rect(0, 0, 4, 2, 0.3)[::-1]) == pytest.approx(-8.0)

    def test_square_vs_itself_rotated(self, rng):
        a, b = rect(0, 0, 1, 1, 0), rect(0, 0, 1, 1, math.pi / 4)
        exact = iou_rotated(a, b)
        # octagon intersection: 2(sqrt 2 - 1) over 2 - that
        inter = 2 * (math.sqrt(2) - 1)
        assert exact == pytest.approx(inter / (2 - inter), abs=1e-12)
        assert exact == pytest.approx(mc_rect_iou(a, b, 10**6, rng), abs=0.005)

    def test_disjoint_and_identical(self):
        a = rect(0, 0, 4, 2, 0.5)
        assert iou_rotated(a, a) == pytest.approx(1.0)
        assert iou_rotated(a, rect(10, 0, 4, 2, 0.5)) == 0.0

    def test_contained(self):
        assert iou_rotated(rect(0, 0, 4, 4, 0.2), rect(0, 0, 2, 2, 1.0)) == pytest.approx(0.25)

    def test_clip_empty(self):
        assert clip_polygon(rect(0, 0, 1, 1, 0), rect(5, 5, 1, 1, 0)) == []

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 4), st.floats(0.1, 4),
           st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 4), st.floats(0.1, 4))
    def test_axis_aligned_agreement(self, x1, y1, w1, h1, x2, y2, w2, h2):
        a, b = (x1, y1, x1 + w1, y1 + h1), (x2, y2, x2 + w2, y2 + h2)
        poly = lambda r: np.array([[r[0], r[1]], [r[2], r[1]], [r[2], r[3]], [r[0], r[3]]])
        assert iou_rotated(poly(a), poly(b)) == pytest.approx(iou_axis_aligned(a, b), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 5), st.floats(0.2, 5), st.floats(-4, 4),
           st.floats(0.2, 5), st.floats(0.2, 5), st.floats(-4, 4))
    def test_symmetric_and_bounded(self, dx, dy, l1, w1, y1, l2, w2, y2):
        a, b = rect(0, 0, l1, w1, y1), rect(dx, dy, l2, w2, y2)
        v = iou_rotated(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou_rotated(b, a), abs=1e-9)

    def test_ground_polygon_ccw(self):
        poly = ground_plane_polygon(OrientedBox3D((1, 2, 0), (4, 2, 1), 2.0))
        assert polygon_area(poly) == pytest.approx(8.0)


class TestAveragePrecision:
    def test_hand_fixture(self):
        status = [TP, FP, TP, TP, FP, TP]
        curve = average_precision(status, [0.0] * 6, 5)
        assert curve.ap == pytest.approx(2.0 / 3.0, abs=1e-12)
        np.testing.assert_allclose(curve.recall, [0.2, 0.2, 0.4, 0.6, 0.6, 0.8])
        np.testing.assert_allclose(curve.precision, [1, 0.5, 2 / 3, 0.75, 0.6, 2 / 3])

    def test_ignored_entries_dropped(self):
        a = average_precision([TP, IGNORED, FP, TP], [0.0] * 4, 3)
        b = average_precision([TP, FP, TP], [0.0] * 3, 3)
        assert a.ap == b.ap

    def test_no_ground_truth(self):
        assert average_precision([FP, FP], [0, 0], 0).ap == 0.0

    def test_aos_half_turn_is_zero(self):
        curve = average_precision([TP], [math.pi], 1)
        assert curve.ap == 1.0 and curve.aos == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([TP, FP]), min_size=1, max_size=30), st.integers(0, 10))
    def test_matches_hand_oracle(self, status, extra):
        n_gt = status.count(TP) + extra
        if n_gt == 0:
            return
        curve = average_precision(status, [0.0] * len(status), n_gt)
        assert curve.ap == pytest.approx(hand_ap11(status, n_gt), abs=1e-12)
        assert curve.aos == pytest.approx(curve.ap, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([TP, FP]), st.floats(-math.pi, math.pi)), min_size=1, max_size=20))
    def test_aos_never_exceeds_ap(self, entries):
        status = [s for s, _ in entries]
        curve = average_precision(status, [d for _, d in entries], max(1, status.count(TP)))
        assert curve.aos <= curve.ap + 1e-12


class TestDifficulty:
    def test_range_bins(self, calib):
        assert difficulty_bin(car(calib, 10, 0)) == "easy"
        assert difficulty_bin(car(calib, 35, 0)) == "moderate"
        assert difficulty_bin(car(calib, 60, 0)) is None

    def test_occlusion_and_truncation(self, calib):
        assert difficulty_bin(car(calib, 10, 0, occlusion=1)) == "moderate"
        assert difficulty_bin(car(calib, 10, 0, occlusion=2)) == "hard"
        assert difficulty_bin(car(calib, 10, 0, truncation=0.4)) == "hard"
        assert difficulty_bin(car(calib, 10, 0, occlusion=3)) is None

    def test_image_mode_uses_height(self, calib):
        lab = car(calib, 10, 0)
        tall = replace(lab, bbox2d=(0, 0, 50, 45))
        short = replace(lab, bbox2d=(0, 0, 50, 30))
        assert difficulty_bin(tall, "image_2d") == "easy"
        assert difficulty_bin(short, "image_2d") == "moderate"


def brute_force_match(dets, ious, care, ignore, thr):
    used = [False] * len(care)
    out = []
    for i in range(len(dets)):
        best, best_j = thr, None
        for j in range(len(care)):
            if care[j] and not used[j] and ious[i][j] > best:
                best, best_j = ious[i][j], j
        if best_j is not None:
            used[best_j] = True
            out.append(TP)
            continue
        for j in range(len(care)):
            if ignore[j] and not used[j] and ious[i][j] > best:
                best, best_j = ious[i][j], j
        if best_j is not None:
            used[best_j] = True
            out.append(IGNORED)
        else:
            out.append(FP)
    return out


class TestMatching:
    def test_duplicate_is_false_positive(self, calib):
        gt = car(calib, 10, 0)
        dets = [det_for(gt, calib, 3), det_for(gt, calib, 2)]
        m = match_detections(dets, [gt], EvalConfig(GROUND_PLANE, 0.7), calib)
        assert list(m.det_status) == [TP, FP]

    def test_van_match_ignored(self, calib):
        van = car(calib, 10, 0, cls="Van")
        m = match_detections([det_for(van, calib)], [van], EvalConfig(GROUND_PLANE, 0.5), calib)
        assert list(m.det_status) == [IGNORED] and m.n_care == 0

    def test_dontcare_only_on_image_plane(self, calib):
        dc = car(calib, 10, 0, cls="DontCare")
        det = det_for(car(calib, 10, 0), calib)
        img = match_detections([det], [dc], EvalConfig(IMAGE_PLANE, 0.5), calib)
        gnd = match_detections([det], [dc], EvalConfig(GROUND_PLANE, 0.5), calib)
        assert list(img.det_status) == [IGNORED] and list(gnd.det_status) == [FP]

    def test_behind_camera_is_false_positive_on_image_plane(self, calib):
        gt = car(calib, 10, 0)
        behind = OrientedBox3D((-10.0, 0.0, -0.9), (4.0, 1.8, 1.5), 0.0)
        det = Detection(behind, box_corners(behind), 1, 0.9)
        m = match_detections([det], [gt], EvalConfig(IMAGE_PLANE, 0.5), calib)
        assert list(m.det_status) == [FP]

    @pytest.mark.parametrize("seed", range(8))
    def test_brute_force(self, calib, seed):
        r = np.random.default_rng(seed)
        gts = [car(calib, 8 + 6 * n, r.uniform(-3, 3), cls=r.choice(["Car", "Car", "Van"]),
                   occlusion=int(r.integers(0, 3))) for n in range(4)]
        dets = [det_for(gts[int(r.integers(0, 4))], calib, shift=r.normal(0, 0.4, 2)) for _ in range(8)]
        cfg = EvalConfig(GROUND_PLANE, 0.5, "easy")
        m = match_detections(dets, gts, cfg, calib)
        from voxfcn.evaluation import _care_and_ignore, iou_matrix
        care, ignore = _care_and_ignore(gts, cfg)
        expected = brute_force_match(dets, iou_matrix(dets, gts, calib, GROUND_PLANE), care, ignore, 0.5)
        assert list(m.det_status) == expected


class TestSelfEvaluation:
    def _frames(self, calib, rng):
        frames = []
        for n in range(6):
            labels = [car(calib, rng.uniform(5, 55), rng.uniform(-8, 8), yaw=rng.uniform(-3, 3),
                          occlusion=int(rng.integers(0, 3)), cls=rng.choice(["Car", "Car", "Van"]))
                      for _ in range(3)]
            dets = [det_for(lab, calib, score=int(rng.integers(1, 9))) for lab in labels if lab.class_name == "Car"]
            frames.append(Frame(f"{n:06d}", dets, labels, calib))
        return frames

    def test_ground_truth_as_detections(self, calib, rng):
        report = evaluate_all(self._frames(calib, rng), 0.7)
        for (metric, level), curve in report.curves.items():
            if curve.n_gt:
                assert curve.ap == pytest.approx(1.0), (metric, level)
                assert curve.aos == pytest.approx(1.0), (metric, level)

    def test_pooled_ranking(self, calib):
        a, b = car(calib, 10, 0), car(calib, 20, 0)
        miss = det_for(a, calib, score=9, shift=(0, 5))
        frames = [Frame("0", [miss, det_for(a, calib, score=1)], [a], calib),
                  Frame("1", [det_for(b, calib, score=5)], [b], calib)]
        curve = evaluate(frames, EvalConfig(GROUND_PLANE, 0.7, "hard"))
        # ranked FP(9), TP(5), TP(1)
        assert curve.ap == pytest.approx(hand_ap11([FP, TP, TP], 2))

    def test_table_and_dump(self, calib, rng):
        report = evaluate_all(self._frames(calib, rng), 0.7)
        table = report.format_table()
        assert "Ground Plane (AP)" in table and "Image Plane (AOS)" in table
        assert "ground_plane.easy.ap = " in report.pr_dump()
