"""KITTI-style evaluation on the image plane and on the ground plane.

A detection is a true positive when its IoU with an unmatched ground truth of
the evaluated difficulty exceeds the threshold.  Detections overlapping
ignored objects (Van, Truck, cars of a harder difficulty, DontCare regions on
the image plane) are neither true nor false positives.  AP and AOS use the
11-point interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .io_kitti import Calibration, ObjectLabel
from .voxel import (
    IGNORE_CLASSES,
    POSITIVE_CLASSES,
    OrientedBox3D,
    label_to_box,
    projected_hull,
    wrap_angle,
)

if TYPE_CHECKING:
    from .inference import Detection

IMAGE_PLANE = "image_plane"
GROUND_PLANE = "ground_plane"
METRICS = (IMAGE_PLANE, GROUND_PLANE)
DIFFICULTIES = ("easy", "moderate", "hard")

TP, FP, IGNORED = 1, 0, -1

# (min 2D height px, max range m, max occlusion, max truncation) per level
DIFFICULTY_RULES = {
    "easy": (40.0, 28.0, 0, 0.15),
    "moderate": (25.0, 47.0, 1, 0.30),
    "hard": (25.0, 47.0, 2, 0.50),
}


@dataclass(frozen=True)
class EvalConfig:
    metric: str = GROUND_PLANE
    iou_threshold: float = 0.7
    difficulty: str = "moderate"
    difficulty_mode: str = "range_3d"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        if self.difficulty_mode not in ("image_2d", "range_3d"):
            raise ValueError(f"unknown difficulty mode {self.difficulty_mode!r}")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    orientation: np.ndarray  # AOS analog of precision
    ap: float
    aos: float
    n_gt: int = 0


@dataclass
class FrameMatch:
    det_status: np.ndarray  # TP / FP / IGNORED per detection, in input order
    det_delta: np.ndarray  # yaw error of TPs (NaN elsewhere)
    gt_found: np.ndarray  # bool per ground truth (False for non-care gts)
    gt_care: np.ndarray  # bool: counts toward recall

    @property
    def n_care(self) -> int:
        return int(self.gt_care.sum())


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def image_plane_box(det: "Detection", calib: Calibration):
    """Clipped pixel hull of the projected corners, or None when all corners
    are behind the camera."""
    return projected_hull(det.corners, calib)


def ground_plane_polygon(box: OrientedBox3D) -> np.ndarray:
    """Footprint rectangle, shape (4, 2), counterclockwise."""
    l, w = box.size[0] / 2.0, box.size[1] / 2.0
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return local @ np.array([[c, s], [-s, c]]) + np.asarray(box.center[:2])


def iou_axis_aligned(a, b) -> float:
    """IoU of (left, top, right, bottom) rectangles."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counterclockwise)."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = [tuple(p) for p in np.asarray(clip, dtype=np.float64)]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        src, out = out, []
        prev = src[-1]
        sp = side(prev)
        for cur in src:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def iou_rotated(a, b) -> float:
    """IoU of two convex CCW polygons; zero-area inputs give 0."""
    area_a, area_b = abs(polygon_area(a)), abs(polygon_area(b))
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = abs(polygon_area(clip_polygon(a, b)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# --------------------------------------------------------------------------
# difficulty and matching
# --------------------------------------------------------------------------


def object_range(gt: ObjectLabel) -> float:
    """Horizontal distance from the camera to the object (camera x-z plane)."""
    x, _, z = gt.location
    return math.hypot(x, z)


def difficulty_bin(gt: ObjectLabel, mode: str = "range_3d"):
    """Easiest level the object qualifies for, or None.

    ``image_2d`` gates on 2D box height; ``range_3d`` replaces the height gate
    with range (40 px ~ 28 m, 25 px ~ 47 m).  Occlusion and truncation caps
    are the KITTI ones in both modes.
    """
    for level in DIFFICULTIES:
        min_h, max_range, max_occ, max_trunc = DIFFICULTY_RULES[level]
        if gt.occlusion > max_occ or gt.truncation > max_trunc:
            continue
        if mode == "image_2d":
            if gt.bbox2d[3] - gt.bbox2d[1] >= min_h:
                return level
        elif mode == "range_3d":
            if object_range(gt) <= max_range:
                return level
        else:
            raise ValueError(f"unknown difficulty mode {mode!r}")
    return None


def _care_and_ignore(gts: Sequence[ObjectLabel], cfg: EvalConfig):
    level = DIFFICULTIES.index(cfg.difficulty)
    care = np.zeros(len(gts), dtype=bool)
    ignore = np.zeros(len(gts), dtype=bool)
    for n, gt in enumerate(gts):
        if gt.class_name in POSITIVE_CLASSES:
            b = difficulty_bin(gt, cfg.difficulty_mode)
            if b is not None and DIFFICULTIES.index(b) <= level:
                care[n] = True
            else:
                ignore[n] = True
        elif gt.class_name in IGNORE_CLASSES:
            ignore[n] = True
        elif gt.class_name == "DontCare" and cfg.metric == IMAGE_PLANE:
            ignore[n] = True
    return care, ignore


def iou_matrix(dets: Sequence["Detection"], gts: Sequence[ObjectLabel], calib: Calibration, metric: str):
    """IoU of every detection against every ground truth.

    Rows of detections that cannot be placed in the metric's space (all
    corners behind the camera, on the image plane) are NaN.
    """
    m = np.zeros((len(dets), len(gts)))
    if metric == IMAGE_PLANE:
        gt_boxes = [gt.bbox2d for gt in gts]
        for i, det in enumerate(dets):
            rect = image_plane_box(det, calib)
            if rect is None:
                m[i] = np.nan
                continue
            for j, g in enumerate(gt_boxes):
                m[i, j] = iou_axis_aligned(rect, g)
    else:
        gt_polys = [
            ground_plane_polygon(label_to_box(gt, calib)) if gt.class_name != "DontCare" else None
            for gt in gts
        ]
        for i, det in enumerate(dets):
            poly = ground_plane_polygon(det.box)
            for j, g in enumerate(gt_polys):
                m[i, j] = iou_rotated(poly, g) if g is not None else 0.0
    return m


def _yaw_delta(det_yaw: float, gt_yaw: float) -> float:
    """Yaw error with the +-pi corner-order ambiguity resolved toward the truth."""
    d = wrap_angle(det_yaw - gt_yaw)
    if abs(d) > math.pi / 2:
        d = wrap_angle(d - math.pi)
    return d


def match_detections(
    dets: Sequence["Detection"],
    gts: Sequence[ObjectLabel],
    cfg: EvalConfig,
    calib: Calibration,
) -> FrameMatch:
    """Greedy one-to-one matching; ``dets`` must already be ranked best first."""
    care, ignore = _care_and_ignore(gts, cfg)
    ious = iou_matrix(dets, gts, calib, cfg.metric)
    gt_yaw = [label_to_box(gt, calib).yaw if (care[n] or ignore[n]) and gt.class_name != "DontCare" else 0.0
              for n, gt in enumerate(gts)]
    used = np.zeros(len(gts), dtype=bool)
    status = np.full(len(dets), FP, dtype=np.int64)
    delta = np.full(len(dets), np.nan)
    for i, det in enumerate(dets):
        row = ious[i]
        if np.isnan(row).any():
            # no image-plane footprint: FP on the image plane
            continue
        cand = np.where(care & ~used & (row > cfg.iou_threshold), row, -1.0)
        if cand.size and cand.max() > 0:
            j = int(np.argmax(cand))
            used[j] = True
            status[i] = TP
            delta[i] = _yaw_delta(det.box.yaw, gt_yaw[j])
            continue
        cand = np.where(ignore & ~used & (row > cfg.iou_threshold), row, -1.0)
        if cand.size and cand.max() > 0:
            used[int(np.argmax(cand))] = True
            status[i] = IGNORED
    return FrameMatch(status, delta, used & care, care)


# --------------------------------------------------------------------------
# AP / AOS
# --------------------------------------------------------------------------

RECALL_LEVELS = tuple(k / 10.0 for k in range(11))


def _interpolate(recall: np.ndarray, values: np.ndarray) -> float:
    total = 0.0
    for r in RECALL_LEVELS:
        hit = values[recall >= r]
        total += float(hit.max()) if hit.size else 0.0
    return total / len(RECALL_LEVELS)


def average_precision(status: Sequence[int], deltas: Sequence[float], n_gt: int) -> PRCurve:
    """11-point AP and AOS over a ranked list of matched detections.

    ``status`` holds TP/FP/IGNORED per detection in rank order and ``deltas``
    the yaw error of each TP.  Each TP contributes (1 + cos delta) / 2 to AOS.
    With no countable ground truth both scores are 0.
    """
    status = np.asarray(status)
    deltas = np.asarray(deltas, dtype=np.float64)
    keep = status != IGNORED
    status, deltas = status[keep], deltas[keep]
    is_tp = status == TP
    tp = np.cumsum(is_tp)
    seen = np.arange(1, len(status) + 1)
    sim = np.where(is_tp, 0.5 * (1.0 + np.cos(np.where(is_tp, deltas, 0.0))), 0.0)
    precision = tp / seen if len(seen) else np.zeros(0)
    orientation = np.cumsum(sim) / seen if len(seen) else np.zeros(0)
    if n_gt <= 0:
        recall = np.zeros(len(status))
        return PRCurve(recall, precision, orientation, 0.0, 0.0, 0)
    recall = tp / n_gt
    return PRCurve(
        recall, precision, orientation,
        _interpolate(recall, precision), _interpolate(recall, orientation), n_gt,
    )


@dataclass
class Frame:
    scene_id: str
    detections: Sequence["Detection"]
    labels: Sequence[ObjectLabel]
    calib: Calibration


def evaluate(frames: Iterable[Frame], cfg: EvalConfig) -> PRCurve:
    """Match each frame, then pool every detection into one ranked list."""
    entries = []
    n_gt = 0
    for f_idx, frame in enumerate(frames):
        dets = sorted(frame.detections, key=lambda d: d.rank_key())
        match = match_detections(dets, frame.labels, cfg, frame.calib)
        n_gt += match.n_care
        for d_idx, det in enumerate(dets):
            key = (-det.score, -det.objectness_score, f_idx, d_idx)
            entries.append((key, match.det_status[d_idx], match.det_delta[d_idx]))
    entries.sort(key=lambda e: e[0])
    return average_precision([e[1] for e in entries], [e[2] for e in entries], n_gt)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    iou_threshold: float
    curves: dict[tuple[str, str], PRCurve] = field(default_factory=dict)

    def format_table(self) -> str:
        head = f"{'':<20}{'Easy':>10}{'Moderate':>10}{'Hard':>10}"
        lines = [f"IoU threshold {self.iou_threshold:g}", "=" * len(head), head, "-" * len(head)]
        for metric in METRICS:
            if not any(k[0] == metric for k in self.curves):
                continue
            label = "Image Plane" if metric == IMAGE_PLANE else "Ground Plane"
            for stat in ("ap", "aos"):
                cells = []
                for level in DIFFICULTIES:
                    curve = self.curves.get((metric, level))
                    cells.append(f"{100 * getattr(curve, stat):9.1f}%" if curve else f"{'-':>10}")
                lines.append(f"{label + ' (' + stat.upper() + ')':<20}" + "".join(cells))
        lines.append("=" * len(head))
        return "\n".join(lines)

    def pr_dump(self) -> str:
        lines = []
        for (metric, level), c in self.curves.items():
            prefix = f"{metric}.{level}"
            lines.append(f"{prefix}.ap = {c.ap:.6f}")
            lines.append(f"{prefix}.aos = {c.aos:.6f}")
            lines.append(f"{prefix}.n_gt = {c.n_gt}")
            lines.append(f"{prefix}.recall = " + ",".join(f"{v:.6f}" for v in c.recall))
            lines.append(f"{prefix}.precision = " + ",".join(f"{v:.6f}" for v in c.precision))
        return "\n".join(lines) + "\n"


def evaluate_all(
    frames: Sequence[Frame],
    iou_threshold: float = 0.7,
    metrics: Sequence[str] = METRICS,
    difficulty_mode: str = "range_3d",
) -> EvalReport:
    report = EvalReport(iou_threshold)
    for metric in metrics:
        for level in DIFFICULTIES:
            cfg = EvalConfig(metric, iou_threshold, level, difficulty_mode)
            report.curves[(metric, level)] = evaluate(frames, cfg)
    return report
