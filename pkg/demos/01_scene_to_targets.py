"""Walk through one synthetic scene: points -> occupancy grid -> training targets.

Run with ``python3 demos/01_scene_to_targets.py``.
"""

import numpy as np

from voxfcn.synth import SYNTH_GRID, SceneSpec, generate_scene
from voxfcn.voxel import box_corners, generate_targets, label_to_box, voxelize

cloud, labels, calib = generate_scene(SceneSpec(seed=3))
print(f"{len(cloud)} points, {len(labels)} labeled vehicles")

# labels live in the camera frame; the grid lives in the sensor frame
for lab in labels:
    box = label_to_box(lab, calib)
    print(f"  {lab.class_name}: center {np.round(box.center, 2)}, size {np.round(box.size, 2)}, "
          f"yaw {box.yaw:+.2f} rad")

grid = voxelize(cloud, SYNTH_GRID)
occupied = int(grid.data.sum())
print(f"grid {SYNTH_GRID.dims} at {SYNTH_GRID.voxel_size} m: {occupied} occupied cells "
      f"({100 * occupied / grid.data.size:.2f}%)")

targets = generate_targets(labels, calib, SYNTH_GRID)
print(f"{targets.n_positive} positive cells, {int((targets.labels == -1).sum())} ignored")

# each positive cell stores the 8 corners relative to its own center
cell, offsets = targets.positive_cells[0], targets.positive_offsets[0].reshape(8, 3)
center = SYNTH_GRID.region_center(cell)
owner = label_to_box(labels[targets.positive_object[0]], calib)
err = np.abs(offsets + center - box_corners(owner)).max()
print(f"cell {tuple(int(v) for v in cell)} decodes its box with max corner error {err:.1e} m")
