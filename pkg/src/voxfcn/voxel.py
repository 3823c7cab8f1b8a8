"""Square-grid discretization of point clouds and training-target generation.

Corner order used everywhere in the package (``box_corners``): for corner
index ``k`` in ``0..7``, bit 0 selects the length half (0 -> +l/2, 1 -> -l/2),
bit 1 the width half and bit 2 the height half, all in the box frame.  The
corners are then rotated by yaw about +z and translated to the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .io_kitti import Calibration, ObjectLabel, PointCloud, project_points, to_camera, to_sensor

NEGATIVE = 0
POSITIVE = 1
IGNORE = -1

POSITIVE_CLASSES = ("Car",)
IGNORE_CLASSES = ("Van", "Truck")

_CORNER_SIGNS = np.array(
    [[1 - 2 * ((k >> b) & 1) for b in range(3)] for k in range(8)], dtype=np.float64
)


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    theta = math.fmod(float(theta), 2.0 * math.pi)
    if theta <= -math.pi:
        theta += 2.0 * math.pi
    elif theta > math.pi:
        theta -= 2.0 * math.pi
    return theta


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise ValueError("origin and dims must have three components")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        for axis, d in zip("LWH", self.dims):
            if d <= 0 or d % 8:
                raise ValueError(f"dim {axis}={d} must be positive and divisible by 8")

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * np.asarray(self.dims)

    def cell_index(self, xyz) -> np.ndarray:
        """Integer cell index of each point (unbounded; may fall outside dims)."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return np.floor((xyz - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def region_center(self, index) -> np.ndarray:
        return region_center(index, self)

    def cell_centers(self) -> np.ndarray:
        """Centers of every cell, shape (L, W, H, 3)."""
        axes = [
            o + (np.arange(d) + 0.5) * self.voxel_size for o, d in zip(self.origin, self.dims)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray  # (1, L, W, H) uint8 occupancy

    def __post_init__(self):
        if self.data.shape != (1, *self.spec.dims):
            raise ValueError(f"data shape {self.data.shape} does not match {self.spec.dims}")

    def as_input(self, dtype=np.float32) -> np.ndarray:
        return self.data.astype(dtype)


@dataclass(frozen=True)
class OrientedBox3D:
    """Box in the sensor frame; ``size`` is (length, width, height), yaw about +z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")


@dataclass(eq=False)
class TargetVolume:
    """Per-cell training targets.

    Offsets are held only for positive cells: ``positive_cells[n]`` is the
    (i, j, k) index whose 24 corner offsets are ``positive_offsets[n]``.
    """

    labels: np.ndarray  # (L, W, H) int8 of NEGATIVE / POSITIVE / IGNORE
    positive_cells: np.ndarray  # (N, 3) int64
    positive_offsets: np.ndarray  # (N, 24) float32
    positive_object: np.ndarray = field(default=None)  # (N,) index into the source labels

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def all_regions(self) -> np.ndarray:
        return self.labels != IGNORE

    @property
    def n_positive(self) -> int:
        return len(self.positive_cells)

    def dense_offsets(self) -> np.ndarray:
        out = np.zeros((24, *self.labels.shape), dtype=np.float32)
        i, j, k = self.positive_cells.T
        out[:, i, j, k] = self.positive_offsets.T
        return out


def voxelize(cloud: PointCloud, spec: GridSpec) -> VoxelGrid:
    data = np.zeros((1, *spec.dims), dtype=np.uint8)
    if len(cloud):
        idx = spec.cell_index(cloud.xyz)
        inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
        i, j, k = idx[inside].T
        data[0, i, j, k] = 1
    return VoxelGrid(spec, data)


def region_center(index, spec: GridSpec) -> np.ndarray:
    index = tuple(int(v) for v in index)
    for axis, (v, d) in enumerate(zip(index, spec.dims)):
        if not 0 <= v < d:
            raise IndexError(f"index {index} out of range on axis {axis} (dim {d})")
    return np.asarray(spec.origin) + (np.asarray(index) + 0.5) * spec.voxel_size


def box_corners(box: OrientedBox3D) -> np.ndarray:
    """The 8 corners, shape (8, 3), in the module-level documented order."""
    local = _CORNER_SIGNS * (0.5 * np.asarray(box.size))
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(box.center)


def point_in_box(points, box: OrientedBox3D) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.column_stack(
        [c * pts[:, 0] + s * pts[:, 1], -s * pts[:, 0] + c * pts[:, 1], pts[:, 2]]
    )
    return np.all(np.abs(local) <= 0.5 * np.asarray(box.size), axis=1)


# --------------------------------------------------------------------------
# label <-> sensor-frame box
# --------------------------------------------------------------------------


def label_to_box(label: ObjectLabel, calib: Calibration) -> OrientedBox3D:
    """Convert a camera-frame KITTI label into a sensor-frame box."""
    h, w, l = label.size
    loc = np.asarray(label.location, dtype=np.float64)
    # camera y points down; the label location is the bottom-face center
    center_cam = loc + np.array([0.0, -0.5 * h, 0.0])
    center = to_sensor(center_cam, calib)[0]
    heading_cam = np.array([math.cos(label.yaw), 0.0, -math.sin(label.yaw)])
    heading = np.linalg.solve(calib.velo_to_cam[:3, :3], heading_cam)
    return OrientedBox3D(tuple(center), (l, w, h), math.atan2(heading[1], heading[0]))


def box_to_label(
    box: OrientedBox3D,
    calib: Calibration,
    class_name: str = "Car",
    truncation: float = 0.0,
    occlusion: int = 0,
    score: float | None = None,
) -> ObjectLabel:
    """Inverse of ``label_to_box``; the 2D box is the clipped corner-projection hull."""
    l, w, h = box.size
    center_cam = to_camera(box.center, calib)[0]
    loc = center_cam + np.array([0.0, 0.5 * h, 0.0])
    heading = np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    heading_cam = calib.velo_to_cam[:3, :3] @ heading
    ry = math.atan2(-heading_cam[2], heading_cam[0])
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    bbox = projected_hull(box_corners(box), calib)
    if bbox is None:
        bbox = (0.0, 0.0, 0.0, 0.0)
    return ObjectLabel(
        class_name=class_name,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        bbox2d=bbox,
        size=(h, w, l),
        location=tuple(loc),
        yaw=wrap_angle(ry),
        score=score,
    )


def projected_hull(corners, calib: Calibration):
    """Min/max pixel rectangle of the in-front corners, clipped to the image.

    Returns None when no corner lies in front of the camera.
    """
    uvd, in_front = project_points(corners, calib)
    if not np.any(in_front):
        return None
    uv = uvd[in_front, :2]
    width, height = calib.image_size
    left, top = uv.min(axis=0)
    right, bottom = uv.max(axis=0)
    left, right = np.clip([left, right], 0.0, width - 1.0)
    top, bottom = np.clip([top, bottom], 0.0, height - 1.0)
    return (float(left), float(top), float(right), float(bottom))


# --------------------------------------------------------------------------
# targets
# --------------------------------------------------------------------------


def _window(spec: GridSpec, lo, hi):
    """Index slices covering cells whose centers may fall in [lo, hi]."""
    lo_idx = np.floor((np.asarray(lo) - spec.origin) / spec.voxel_size - 0.5).astype(int)
    hi_idx = np.ceil((np.asarray(hi) - spec.origin) / spec.voxel_size - 0.5).astype(int) + 1
    lo_idx = np.clip(lo_idx, 0, spec.dims)
    hi_idx = np.clip(hi_idx, 0, spec.dims)
    return tuple(slice(a, b) for a, b in zip(lo_idx, hi_idx))


def generate_targets(
    labels: Sequence[ObjectLabel],
    calib: Calibration,
    spec: GridSpec,
    sphere_radius_fraction: float = 0.25,
) -> TargetVolume:
    """Objectness labels and corner-offset targets for one scene.

    A Car marks as positive every cell whose center lies within
    ``sphere_radius_fraction * min(length, width)`` of the box center; the
    target at such a cell is each corner minus the cell center.  Van/Truck
    interiors (and their center spheres) are ignored.  A cell claimed by two
    cars goes to the nearer center.
    """
    out = np.full(spec.dims, NEGATIVE, dtype=np.int8)
    centers = spec.cell_centers()
    best_dist = np.full(spec.dims, np.inf)
    owner = np.full(spec.dims, -1, dtype=np.int64)

    boxes = [
        (n, label_to_box(lab, calib)) for n, lab in enumerate(labels)
        if lab.class_name in POSITIVE_CLASSES + IGNORE_CLASSES
    ]

    for n, box in boxes:
        if labels[n].class_name not in IGNORE_CLASSES:
            continue
        corners = box_corners(box)
        win = _window(spec, corners.min(axis=0), corners.max(axis=0))
        local = centers[win].reshape(-1, 3)
        r = sphere_radius_fraction * min(box.size[:2])
        hit = point_in_box(local, box) | (np.linalg.norm(local - box.center, axis=1) <= r)
        sub = out[win].reshape(-1)
        sub[hit] = IGNORE
        out[win] = sub.reshape(out[win].shape)

    for n, box in boxes:
        if labels[n].class_name not in POSITIVE_CLASSES:
            continue
        r = sphere_radius_fraction * min(box.size[:2])
        c = np.asarray(box.center)
        win = _window(spec, c - r, c + r)
        dist = np.linalg.norm(centers[win] - c, axis=-1)
        take = (dist <= r) & (dist < best_dist[win])
        best_dist[win] = np.where(take, dist, best_dist[win])
        owner[win] = np.where(take, n, owner[win])

    pos = np.argwhere(owner >= 0)
    obj = owner[tuple(pos.T)]
    offsets = np.zeros((len(pos), 24), dtype=np.float32)
    corner_cache = {n: box_corners(box) for n, box in boxes}
    for row, (cell, n) in enumerate(zip(pos, obj)):
        p = centers[tuple(cell)]
        offsets[row] = (corner_cache[n] - p).ravel()
    out[tuple(pos.T)] = POSITIVE
    return TargetVolume(out, pos.astype(np.int64), offsets, obj)
