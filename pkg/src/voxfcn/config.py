"""Flat ``key = value`` run configuration.

Every key has a default; unknown keys are rejected.  Tuple values are written
comma-separated.  Precedence is command-line overrides > file > defaults.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Iterable

from .errors import ParseError
from .evaluation import METRICS
from .fcn3d import ArchConfig, TrainConfig
from .inference import InferenceConfig
from .synth import SceneSpec
from .voxel import GridSpec

# key -> (default, description)
DEFAULTS: dict[str, tuple[Any, str]] = {
    "grid.origin": ((0.0, -12.8, -3.2), "world coordinate of the (0,0,0) cell corner, meters"),
    "grid.voxel_size": (0.4, "cubic cell edge, meters"),
    "grid.dims": ((64, 64, 16), "cell counts along x, y, z (each divisible by 8)"),
    "targets.sphere_radius_fraction": (0.25, "positive sphere radius as a fraction of min(length, width)"),
    "arch.channels": ((16, 32, 64), "conv1..conv3 output channels"),
    "arch.kernels": ((5, 5, 3), "conv1..conv3 kernel extents (odd)"),
    "train.w": (0.1, "box-loss weight"),
    "train.lr": (0.003, "learning rate"),
    "train.momentum": (0.9, "SGD momentum"),
    "train.epochs": (45, "passes over the training scenes"),
    "train.neg_pos_ratio": (8.0, "sampled negatives per positive cell (at least 256)"),
    "train.seed": (0, "initialization and shuffling seed"),
    "train.lr_decay": (0.95, "per-epoch learning-rate factor"),
    "train.clip_norm": (50.0, "global gradient-norm cap per step (0 disables)"),
    "train.augment_shift": (4, "max random x/y translation in cells per step (0 disables)"),
    "train.augment_mirror": (True, "randomly mirror each step's scene across the grid's y-center"),
    "infer.threshold": (0.9, "foreground probability needed to emit a candidate"),
    "infer.neighbor_radius": (1.0, "mean corner distance counted as a neighbor, meters"),
    "infer.overlap_threshold": (0.1, "ground-plane IoU above which a box is suppressed"),
    "infer.max_candidates": (4000, "cap on candidates per scene (most confident kept)"),
    "eval.iou_threshold": (0.7, "IoU a detection must exceed to count"),
    "eval.difficulty_mode": ("range_3d", "range_3d or image_2d"),
    "eval.metrics": (METRICS, "metrics to report"),
    "synth.seed": (0, "seed of the first scene; scene i uses seed + i"),
    "synth.n_vehicles": ((1, 3), "min, max vehicles per scene"),
    "synth.x_range": ((4.0, 23.0), "vehicle center x range, meters"),
    "synth.y_range": ((-10.0, 10.0), "vehicle center y range, meters"),
    "synth.length_range": ((3.5, 4.5), "vehicle length range, meters"),
    "synth.width_range": ((1.6, 1.9), "vehicle width range, meters"),
    "synth.height_range": ((1.4, 1.7), "vehicle height range, meters"),
    "synth.yaw_range": ((-math.pi / 4, math.pi / 4), "vehicle yaw range, radians"),
    "synth.points_per_m2": (40.0, "vehicle surface sampling density"),
    "synth.ground_points_per_m2": (4.0, "ground sampling density"),
    "synth.ground_level": (-1.73, "ground height in the sensor frame, meters"),
    "synth.ground_noise_sigma": (0.02, "ground height noise, meters"),
    "synth.clutter_count": (4, "clutter blobs per scene"),
    "gradcheck.step": (1e-3, "central-difference step"),
    "gradcheck.threshold": (1e-3, "maximum allowed relative error"),
    "gradcheck.grid": ((16, 16, 16), "grid dims for the full-network check"),
    "gradcheck.coords": (64, "coordinates checked per parameter array"),
    "runtime.threads": (1, "BLAS worker threads"),
    "paths.data": ("", "default data directory"),
    "paths.checkpoint": ("", "default checkpoint path"),
}


def _convert(key: str, text: str):
    default = DEFAULTS[key][0]
    text = text.strip()
    try:
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if isinstance(default[0], str):
                return tuple(items)
            kind = int if isinstance(default[0], int) else float
            vals = tuple(kind(t) for t in items)
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} values, got {len(vals)}")
            return vals
        if isinstance(default, bool):
            flag = text.strip().lower()
            if flag not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return flag in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ParseError(f"{key}: {exc}") from None


class Config:
    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, key):
        return self.values[key]

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ParseError(f"unknown config key {key!r}")
        self.values[key] = _convert(key, value) if isinstance(value, str) else value

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "Config":
        cfg = cls()
        if path:
            with open(path) as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    key, sep, value = line.partition("=")
                    if not sep:
                        raise ParseError("expected 'key = value'", path, lineno)
                    try:
                        cfg[key.strip()] = value
                    except ParseError as exc:
                        raise ParseError(str(exc), path, lineno) from None
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ParseError(f"override {item!r} is not key=value")
            cfg[key.strip()] = value
        return cfg

    def dump(self) -> str:
        lines = []
        for key, (_, doc) in DEFAULTS.items():
            v = self.values[key]
            text = ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"# {doc}\n{key} = {text}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    # typed views ----------------------------------------------------------

    def grid(self) -> GridSpec:
        return GridSpec(self["grid.origin"], self["grid.voxel_size"], self["grid.dims"])

    def arch(self) -> ArchConfig:
        return ArchConfig(channels=self["arch.channels"], kernels=self["arch.kernels"])

    def train(self) -> TrainConfig:
        return TrainConfig(
            w=self["train.w"],
            lr=self["train.lr"],
            momentum=self["train.momentum"],
            epochs=self["train.epochs"],
            neg_pos_ratio=self["train.neg_pos_ratio"],
            seed=self["train.seed"],
            lr_decay=self["train.lr_decay"],
            clip_norm=self["train.clip_norm"],
            augment_shift=self["train.augment_shift"],
            augment_mirror=self["train.augment_mirror"],
        )

    def inference(self) -> InferenceConfig:
        return InferenceConfig(
            threshold=self["infer.threshold"],
            neighbor_radius=self["infer.neighbor_radius"],
            overlap_threshold=self["infer.overlap_threshold"],
            max_candidates=self["infer.max_candidates"],
        )

    def scene(self) -> SceneSpec:
        return SceneSpec(
            n_vehicles=self["synth.n_vehicles"],
            x_range=self["synth.x_range"],
            y_range=self["synth.y_range"],
            length_range=self["synth.length_range"],
            width_range=self["synth.width_range"],
            height_range=self["synth.height_range"],
            yaw_range=self["synth.yaw_range"],
            points_per_m2=self["synth.points_per_m2"],
            ground_points_per_m2=self["synth.ground_points_per_m2"],
            ground_level=self["synth.ground_level"],
            ground_noise_sigma=self["synth.ground_noise_sigma"],
            clutter_count=self["synth.clutter_count"],
            seed=self["synth.seed"],
            grid=self.grid(),
        )
