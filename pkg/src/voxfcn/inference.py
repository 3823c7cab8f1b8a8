"""From output maps to scored, suppressed detections.

1. every cell whose foreground probability clears ``threshold`` decodes a
   candidate box: predicted offsets plus the cell center;
2. each candidate is scored by the number of candidates (itself included)
   whose mean corner distance to it is within ``neighbor_radius``;
3. greedy suppression keeps the best-scored box and drops everything whose
   ground-plane IoU with it exceeds ``overlap_threshold``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateBoxError, ParseError
from .evaluation import ground_plane_polygon, iou_rotated
from .fcn3d import OutputMaps, foreground_probability
from .voxel import GridSpec, OrientedBox3D, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceConfig:
    threshold: float = 0.9
    neighbor_radius: float = 1.0
    overlap_threshold: float = 0.1
    max_candidates: int = 4000


@dataclass(eq=False)
class Candidate:
    corners: np.ndarray  # (8, 3)
    source_region: tuple[int, int, int]
    objectness_score: float


@dataclass(eq=False)
class Detection:
    box: OrientedBox3D
    corners: np.ndarray  # (8, 3)
    score: int
    objectness_score: float = 0.0
    source_region: tuple[int, int, int] = (0, 0, 0)

    def rank_key(self):
        """Sort key: higher score first, then higher objectness, then lowest region."""
        return (-self.score, -self.objectness_score, self.source_region)


def extract_candidates(
    maps: OutputMaps, spec: GridSpec, threshold: float = 0.5, max_candidates: int | None = None
) -> list[Candidate]:
    """Decode every cell whose foreground probability is at least ``threshold``.

    With ``max_candidates`` set, only the most confident cells are kept.
    """
    prob = foreground_probability(maps.objectness)
    idx = np.argwhere(prob >= threshold)
    if max_candidates is not None and len(idx) > max_candidates:
        p = prob[tuple(idx.T)]
        # stable sort keeps lexicographic order among equal probabilities
        keep = np.sort(np.argsort(-p, kind="stable")[:max_candidates])
        idx = idx[keep]
    if len(idx) == 0:
        return []
    i, j, k = idx.T
    offsets = maps.boxmap[:, i, j, k].T.astype(np.float64).reshape(-1, 8, 3)
    centers = np.asarray(spec.origin) + (idx + 0.5) * spec.voxel_size
    corners = offsets + centers[:, None, :]
    return [
        Candidate(corners[n], tuple(int(v) for v in idx[n]), float(prob[tuple(idx[n])]))
        for n in range(len(idx))
    ]


# corner pairs differing only in bit 0 (length axis), bit 1 (width), bit 2 (height)
_EDGE_PAIRS = {
    axis: [(k, k | (1 << axis)) for k in range(8) if not k & (1 << axis)] for axis in range(3)
}


def corners_to_box(corners) -> OrientedBox3D:
    """Fit an oriented box to 8 corners given in ``box_corners`` order.

    Center is the corner mean.  Yaw is taken from the summed horizontal
    length edges plus the width edges turned by -90 degrees, so the exact
    yaw (not just modulo pi) of a perfect cuboid is recovered.  Sizes are
    mean absolute edge extents in the de-rotated frame.
    """
    c = np.asarray(corners, dtype=np.float64).reshape(8, 3)
    center = c.mean(axis=0)
    if np.max(np.abs(c - center)) < 1e-9:
        raise DegenerateBoxError("all corners coincide")
    edges = {a: np.array([c[p] - c[q] for p, q in pairs]) for a, pairs in _EDGE_PAIRS.items()}
    lvec = edges[0][:, :2].sum(axis=0)
    wvec = edges[1][:, :2].sum(axis=0)
    direction = lvec + np.array([wvec[1], -wvec[0]])
    if np.hypot(*direction) < 1e-12:
        raise DegenerateBoxError("no horizontal extent to orient the box")
    yaw = math.atan2(direction[1], direction[0])
    cy, sy = math.cos(yaw), math.sin(yaw)
    size = []
    for a in range(3):
        e = edges[a]
        local = np.column_stack([cy * e[:, 0] + sy * e[:, 1], -sy * e[:, 0] + cy * e[:, 1], e[:, 2]])
        size.append(float(np.mean(np.abs(local[:, a]))))
    if min(size) <= 0:
        raise DegenerateBoxError(f"fitted size {size} is not positive")
    return OrientedBox3D(tuple(center), tuple(size), yaw)


def neighbor_counts(corners: np.ndarray, radius: float, chunk: int = 512) -> np.ndarray:
    """For each box, count boxes whose mean corner distance is <= radius."""
    n = len(corners)
    counts = np.zeros(n, dtype=np.int64)
    for start in range(0, n, chunk):
        block = corners[start : start + chunk]
        d = np.linalg.norm(block[:, None] - corners[None], axis=-1).mean(axis=-1)
        counts[start : start + chunk] = np.sum(d <= radius, axis=1)
    return counts


def score_candidates(cands: Sequence[Candidate], neighbor_radius: float = 1.0) -> list[Detection]:
    """Neighbor-count scoring; candidates whose corners are degenerate are dropped."""
    if not cands:
        return []
    corners = np.stack([c.corners for c in cands])
    counts = neighbor_counts(corners, neighbor_radius)
    dets = []
    for cand, count in zip(cands, counts):
        try:
            box = corners_to_box(cand.corners)
        except DegenerateBoxError:
            log.debug("dropping degenerate candidate at %s", cand.source_region)
            continue
        dets.append(Detection(box, cand.corners, int(count), cand.objectness_score, cand.source_region))
    return dets


def suppress(dets: Sequence[Detection], overlap_threshold: float = 0.1) -> list[Detection]:
    """Greedy suppression on ground-plane IoU; returns kept boxes in selection order."""
    order = sorted(dets, key=Detection.rank_key)
    if not order:
        return []
    polys = [ground_plane_polygon(d.box) for d in order]
    centers = np.array([d.box.center[:2] for d in order])
    radii = np.array([0.5 * math.hypot(*d.box.size[:2]) for d in order])
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for n in range(len(order)):
        if not alive[n]:
            continue
        kept.append(order[n])
        alive[n] = False
        near = np.flatnonzero(
            alive & (np.linalg.norm(centers - centers[n], axis=1) < radii + radii[n])
        )
        for m in near:
            if iou_rotated(polys[n], polys[m]) > overlap_threshold:
                alive[m] = False
    return kept


def detect(maps: OutputMaps, spec: GridSpec, cfg: InferenceConfig = InferenceConfig()):
    """Full pipeline; returns ``(candidates, scored, kept)``."""
    cands = extract_candidates(maps, spec, cfg.threshold, cfg.max_candidates)
    scored = score_candidates(cands, cfg.neighbor_radius)
    return cands, scored, suppress(scored, cfg.overlap_threshold)


# --------------------------------------------------------------------------
# detection files
# --------------------------------------------------------------------------

DETECTION_COLUMNS = (
    ["scene_id"]
    + [f"c{k}_{a}" for k in range(8) for a in "xyz"]
    + ["cx", "cy", "cz", "length", "width", "height", "yaw", "neighbor_score", "objectness"]
)


def format_detection(scene_id: str, det: Detection) -> str:
    vals = [*det.corners.ravel(), *det.box.center, *det.box.size, det.box.yaw]
    return " ".join([scene_id, *(f"{v:.6f}" for v in vals), str(det.score), f"{det.objectness_score:.6f}"])


def write_detections(path, scene_dets: dict[str, Sequence[Detection]]) -> None:
    with open(path, "w") as fh:
        fh.write("# " + " ".join(DETECTION_COLUMNS) + "\n")
        for scene_id, dets in scene_dets.items():
            for det in dets:
                fh.write(format_detection(scene_id, det) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != len(DETECTION_COLUMNS):
                raise ParseError(
                    f"expected {len(DETECTION_COLUMNS)} columns, found {len(fields)}", path, lineno
                )
            try:
                vals = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            corners = np.array(vals[:24]).reshape(8, 3)
            box = OrientedBox3D(tuple(vals[24:27]), tuple(vals[27:30]), wrap_angle(vals[30]))
            out.setdefault(fields[0], []).append(Detection(box, corners, int(vals[31]), vals[32]))
    return out
