"""Deterministic synthetic lidar scenes written in the KITTI file layout.

Vehicles are boxes resting on a flat ground plane.  Only faces turned toward
the sensor (origin) are sampled, which stands in for lidar self-occlusion.
Clutter is a set of Gaussian point blobs.

Box-shaped vehicles look identical under a half-turn, so heading is only
observable modulo pi; the default yaw range is kept well inside a pi-wide
window for that reason.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InfeasibleSceneError
from .evaluation import ground_plane_polygon, iou_rotated
from .io_kitti import (
    Calibration,
    ObjectLabel,
    PointCloud,
    write_calib,
    write_label_file,
    write_velodyne_bin,
)
from .voxel import GridSpec, OrientedBox3D, box_corners, box_to_label

MAX_ATTEMPTS = 10_000

SYNTH_GRID = GridSpec(origin=(0.0, -12.8, -3.2), voxel_size=0.4, dims=(64, 64, 16))


@dataclass(frozen=True)
class SceneSpec:
    n_vehicles: tuple[int, int] = (1, 3)
    x_range: tuple[float, float] = (4.0, 23.0)
    y_range: tuple[float, float] = (-10.0, 10.0)
    length_range: tuple[float, float] = (3.5, 4.5)
    width_range: tuple[float, float] = (1.6, 1.9)
    height_range: tuple[float, float] = (1.4, 1.7)
    yaw_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    points_per_m2: float = 40.0
    ground_points_per_m2: float = 4.0
    ground_level: float = -1.73
    ground_noise_sigma: float = 0.02
    clutter_count: int = 4
    clutter_points: int = 40
    clutter_sigma: float = 0.25
    seed: int = 0
    grid: GridSpec = SYNTH_GRID

    def __post_init__(self):
        lo, hi = self.n_vehicles
        if not 0 <= lo <= hi:
            raise ValueError(f"bad vehicle count range {self.n_vehicles}")
        if self.points_per_m2 < 0 or self.ground_points_per_m2 < 0:
            raise ValueError("densities must be non-negative")


def synthetic_calibration() -> Calibration:
    """KITTI-like pinhole: camera x = -sensor y, camera y = -sensor z, camera z = sensor x."""
    tr = np.array(
        [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, -0.08],
            [1.0, 0.0, 0.0, -0.27],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    proj = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return Calibration(tr, proj, (1242, 375))


def _fits_grid(box: OrientedBox3D, grid: GridSpec, margin: float = 0.2) -> bool:
    c = box_corners(box)
    lo = np.asarray(grid.origin) + margin
    hi = grid.upper - margin
    return bool(np.all(c >= lo) and np.all(c <= hi))


def _sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[OrientedBox3D]:
    n = int(rng.integers(spec.n_vehicles[0], spec.n_vehicles[1] + 1))
    boxes: list[OrientedBox3D] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise InfeasibleSceneError(f"could not place {n} vehicles in {MAX_ATTEMPTS} attempts")
        l = rng.uniform(*spec.length_range)
        w = rng.uniform(*spec.width_range)
        h = rng.uniform(*spec.height_range)
        box = OrientedBox3D(
            (rng.uniform(*spec.x_range), rng.uniform(*spec.y_range), spec.ground_level + h / 2),
            (l, w, h),
            rng.uniform(*spec.yaw_range),
        )
        if not _fits_grid(box, spec.grid):
            continue
        poly = ground_plane_polygon(box)
        if any(iou_rotated(poly, ground_plane_polygon(b)) > 0 for b in boxes):
            continue
        boxes.append(box)
    return boxes


# faces as (axis, sign) in the box frame
_FACES = [(a, s) for a in range(3) for s in (1.0, -1.0)]


def sample_visible_faces(box: OrientedBox3D, density: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the faces whose outward normal points at the origin."""
    half = 0.5 * np.asarray(box.size)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.asarray(box.center)
    chunks = []
    for axis, sign in _FACES:
        normal_local = np.zeros(3)
        normal_local[axis] = sign
        normal = rot @ normal_local
        face_center = center + rot @ (normal_local * half)
        if np.dot(normal, face_center) >= 0:
            continue
        u, v = [a for a in range(3) if a != axis]
        area = 4.0 * half[u] * half[v]
        count = int(round(area * density))
        if count == 0:
            continue
        local = np.empty((count, 3))
        local[:, axis] = sign * half[axis]
        local[:, u] = rng.uniform(-half[u], half[u], count)
        local[:, v] = rng.uniform(-half[v], half[v], count)
        chunks.append(local @ rot.T + center)
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def _outside_footprints(xy: np.ndarray, boxes, pad: float = 0.0) -> np.ndarray:
    keep = np.ones(len(xy), dtype=bool)
    for box in boxes:
        d = xy - np.asarray(box.center[:2])
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        lx = np.abs(c * d[:, 0] + s * d[:, 1])
        ly = np.abs(-s * d[:, 0] + c * d[:, 1])
        keep &= ~((lx <= box.size[0] / 2 + pad) & (ly <= box.size[1] / 2 + pad))
    return keep


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, list[ObjectLabel], Calibration]:
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    boxes = _sample_boxes(spec, rng)
    calib = synthetic_calibration()

    parts = [sample_visible_faces(b, spec.points_per_m2, rng) for b in boxes]

    lo, hi = np.asarray(grid.origin[:2]), grid.upper[:2]
    n_ground = int(round(np.prod(hi - lo) * spec.ground_points_per_m2))
    xy = rng.uniform(lo, hi, size=(n_ground, 2))
    xy = xy[_outside_footprints(xy, boxes)]
    z = spec.ground_level + spec.ground_noise_sigma * rng.standard_normal(len(xy))
    parts.append(np.column_stack([xy, z]))

    for _ in range(spec.clutter_count):
        for _ in range(MAX_ATTEMPTS):
            center_xy = rng.uniform(lo + 1.0, hi - 1.0)
            if _outside_footprints(center_xy[None], boxes, pad=1.0)[0]:
                break
        else:
            raise InfeasibleSceneError("no room for clutter")
        height = rng.uniform(0.3, 1.5)
        blob = rng.standard_normal((spec.clutter_points, 3)) * spec.clutter_sigma
        blob[:, 2] = np.abs(blob[:, 2]) * height / max(spec.clutter_sigma, 1e-9)
        blob[:, :2] += center_xy
        blob[:, 2] += spec.ground_level
        parts.append(blob)

    xyz = np.concatenate(parts) if parts else np.zeros((0, 3))
    labels = [box_to_label(b, calib) for b in boxes]
    return PointCloud.from_xyz(xyz), labels, calib


def scene_id(index: int) -> str:
    return f"{index:06d}"


def write_scene(root, index: int, cloud: PointCloud, labels, calib: Calibration) -> str:
    """Write one KITTI trio under ``root`` (velodyne/, label_2/, calib/)."""
    root = Path(root)
    sid = scene_id(index)
    for sub in ("velodyne", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_velodyne_bin(cloud, root / "velodyne" / f"{sid}.bin")
    write_label_file(labels, root / "label_2" / f"{sid}.txt")
    write_calib(calib, root / "calib" / f"{sid}.txt")
    return sid


def write_dataset(root, count: int, base: SceneSpec, first_index: int = 0) -> list[str]:
    """Generate ``count`` scenes seeded ``base.seed + i`` and write an index file."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        spec = replace(base, seed=base.seed + first_index + i)
        cloud, labels, calib = generate_scene(spec)
        ids.append(write_scene(root, first_index + i, cloud, labels, calib))
    (root / "index.txt").write_text("".join(f"{sid}\n" for sid in ids))
    return ids

