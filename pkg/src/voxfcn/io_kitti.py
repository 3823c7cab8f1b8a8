"""Readers and writers for the KITTI object-detection file trio.

Velodyne scans are flat little-endian float32 records ``(x, y, z, intensity)``.
Labels are whitespace-separated text, 15 fields per object.  Calibration files
hold ``KEY: floats`` rows; only ``P2``, ``R0_rect`` and ``Tr_velo_to_cam`` are
consumed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MalformedFileError, ParseError

VELODYNE_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16

# KITTI camera image extent; calibration files do not carry it
KITTI_IMAGE_SIZE = (1242, 375)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Lidar returns in the sensor frame, one row per point: x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_xyz(cls, xyz, intensity=None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float32).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(xyz), dtype=np.float32)
        return cls(np.column_stack([xyz, np.asarray(intensity, dtype=np.float32)]))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ObjectLabel:
    """One annotated object, in the KITTI rectified camera frame.

    ``size`` is ``(height, width, length)`` and ``location`` is the bottom
    center of the box, both as KITTI writes them.
    """

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    size: tuple[float, float, float]
    location: tuple[float, float, float]
    yaw: float
    score: float | None = None

    def __post_init__(self):
        left, top, right, bottom = self.bbox2d
        if right < left or bottom < top:
            raise ValueError(f"inverted 2D box {self.bbox2d}")
        # DontCare regions use -1 placeholders for all 3D fields
        if self.class_name != "DontCare" and min(self.size) < 0:
            raise ValueError(f"negative object size {self.size}")

    @property
    def height(self) -> float:
        return self.size[0]

    @property
    def width(self) -> float:
        return self.size[1]

    @property
    def length(self) -> float:
        return self.size[2]


@dataclass(frozen=True, eq=False)
class Calibration:
    velo_to_cam: np.ndarray
    cam_projection: np.ndarray
    image_size: tuple[int, int] = KITTI_IMAGE_SIZE

    def __post_init__(self):
        tr = np.asarray(self.velo_to_cam, dtype=np.float64)
        proj = np.asarray(self.cam_projection, dtype=np.float64)
        if tr.shape != (4, 4):
            raise ValueError(f"velo_to_cam must be 4x4, got {tr.shape}")
        if proj.shape != (3, 4):
            raise ValueError(f"cam_projection must be 3x4, got {proj.shape}")
        if not np.array_equal(tr[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("velo_to_cam bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "velo_to_cam", tr)
        object.__setattr__(self, "cam_projection", proj)
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    @property
    def cam_to_velo(self) -> np.ndarray:
        return np.linalg.inv(self.velo_to_cam)


# --------------------------------------------------------------------------
# velodyne
# --------------------------------------------------------------------------


def read_velodyne_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise MalformedFileError(
            f"{path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}"
        )
    return PointCloud(np.frombuffer(raw, dtype=VELODYNE_DTYPE).reshape(-1, 4))


def write_velodyne_bin(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype=VELODYNE_DTYPE).tobytes())


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------


def parse_label_line(line: str, path=None, lineno=None) -> ObjectLabel:
    fields = line.split()
    # 16 fields is the KITTI results format: a label line plus a score
    if len(fields) not in (15, 16):
        raise ParseError(f"expected 15 fields, found {len(fields)}", path, lineno)
    try:
        vals = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise ParseError(str(exc), path, lineno) from None
    try:
        return ObjectLabel(
            class_name=fields[0],
            truncation=vals[0],
            occlusion=int(vals[1]),
            alpha=vals[2],
            bbox2d=tuple(vals[3:7]),
            size=tuple(vals[7:10]),
            location=tuple(vals[10:13]),
            yaw=vals[13],
            score=vals[14] if len(vals) == 15 else None,
        )
    except ValueError as exc:
        raise ParseError(str(exc), path, lineno) from None


def parse_label_file(path) -> list[ObjectLabel]:
    labels = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                labels.append(parse_label_line(line, path, lineno))
    return labels


def format_label_line(label: ObjectLabel) -> str:
    vals = [
        label.truncation, label.occlusion, label.alpha,
        *label.bbox2d, *label.size, *label.location, label.yaw,
    ]
    parts = [label.class_name, f"{vals[0]:.2f}", str(int(vals[1]))]
    parts += [f"{v:.6f}" for v in vals[2:]]
    if label.score is not None:
        parts.append(f"{label.score:.6f}")
    return " ".join(parts)


def write_label_file(labels: Sequence[ObjectLabel], path) -> None:
    with open(path, "w") as fh:
        for label in labels:
            fh.write(format_label_line(label) + "\n")


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

_CALIB_SHAPES = {"P2": (3, 4), "Tr_velo_to_cam": (3, 4), "R0_rect": (3, 3)}


def parse_calib(path, image_size=KITTI_IMAGE_SIZE) -> Calibration:
    """Read a KITTI object calibration file.

    ``R0_rect``, when present, is folded into ``velo_to_cam`` so that the
    stored transform lands directly in the rectified camera frame that P2
    and the labels use.
    """
    rows = {}
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            if not sep:
                raise ParseError("expected 'KEY: values'", path, lineno)
            key = key.strip()
            if key not in _CALIB_SHAPES:
                continue
            try:
                vals = [float(v) for v in rest.split()]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            shape = _CALIB_SHAPES[key]
            if len(vals) != shape[0] * shape[1]:
                raise ParseError(
                    f"{key} needs {shape[0] * shape[1]} values, found {len(vals)}", path, lineno
                )
            rows[key] = np.array(vals).reshape(shape)

    for key in ("P2", "Tr_velo_to_cam"):
        if key not in rows:
            raise ParseError(f"missing key {key}", path)

    tr = np.eye(4)
    tr[:3] = rows["Tr_velo_to_cam"]
    if "R0_rect" in rows:
        rect = np.eye(4)
        rect[:3, :3] = rows["R0_rect"]
        tr = rect @ tr
        tr[3] = (0.0, 0.0, 0.0, 1.0)
    return Calibration(velo_to_cam=tr, cam_projection=rows["P2"], image_size=image_size)


def write_calib(calib: Calibration, path) -> None:
    """Write in the full KITTI layout (P0..P3, R0_rect, Tr_velo_to_cam, Tr_imu_to_velo)."""

    def row(mat):
        return " ".join(f"{v:.12e}" for v in np.asarray(mat).ravel())

    p = calib.cam_projection
    lines = [f"P{i}: {row(p)}" for i in range(4)]
    lines.append(f"R0_rect: {row(np.eye(3))}")
    lines.append(f"Tr_velo_to_cam: {row(calib.velo_to_cam[:3])}")
    lines.append(f"Tr_imu_to_velo: {row(np.eye(4)[:3])}")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------


def to_camera(points, calib: Calibration) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    homo = np.column_stack([pts, np.ones(len(pts))])
    return (homo @ calib.velo_to_cam.T)[:, :3]


def to_sensor(points_cam, calib: Calibration) -> np.ndarray:
    pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    homo = np.column_stack([pts, np.ones(len(pts))])
    return (homo @ calib.cam_to_velo.T)[:, :3]


def project_points(points, calib: Calibration) -> tuple[np.ndarray, np.ndarray]:
    """Project sensor-frame points into the image.

    Returns ``(uvd, in_front)`` where ``uvd[:, :2]`` are pixel coordinates,
    ``uvd[:, 2]`` is camera-frame depth, and ``in_front`` flags depth > 0.
    Pixel coordinates of points with depth <= 0 are not meaningful.
    """
    cam = to_camera(points, calib)
    homo = np.column_stack([cam, np.ones(len(cam))])
    img = homo @ calib.cam_projection.T
    w = img[:, 2]
    safe = np.where(w == 0.0, math.inf, w)
    uvd = np.column_stack([img[:, 0] / safe, img[:, 1] / safe, cam[:, 2]])
    return uvd, cam[:, 2] > 0.0
