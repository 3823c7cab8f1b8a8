"""Loading KITTI-layout directories into network-ready (grid, targets) pairs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .io_kitti import Calibration, ObjectLabel, PointCloud, parse_calib, parse_label_file, read_velodyne_bin
from .voxel import GridSpec, TargetVolume, VoxelGrid, generate_targets, voxelize


@dataclass(eq=False)
class Frame:
    scene_id: str
    cloud: PointCloud
    labels: list[ObjectLabel]
    calib: Calibration


def scene_ids(root) -> list[str]:
    """Scene ids from ``index.txt`` when present, else from velodyne/*.bin."""
    root = Path(root)
    index = root / "index.txt"
    if index.exists():
        return [line.strip() for line in index.read_text().splitlines() if line.strip()]
    return sorted(p.stem for p in (root / "velodyne").glob("*.bin"))


def load_frame(root, sid: str, with_labels: bool = True) -> Frame:
    root = Path(root)
    cloud = read_velodyne_bin(root / "velodyne" / f"{sid}.bin")
    calib = parse_calib(root / "calib" / f"{sid}.txt")
    labels = []
    label_path = root / "label_2" / f"{sid}.txt"
    if with_labels and label_path.exists():
        labels = parse_label_file(label_path)
    return Frame(sid, cloud, labels, calib)


def prepare(frame: Frame, spec: GridSpec, sphere_radius_fraction: float = 0.25) -> tuple[VoxelGrid, TargetVolume]:
    return voxelize(frame.cloud, spec), generate_targets(frame.labels, frame.calib, spec, sphere_radius_fraction)
