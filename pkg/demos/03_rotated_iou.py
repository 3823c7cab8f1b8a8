"""Ground-plane overlap of two rotated footprints, checked by sampling."""

import math

import numpy as np

from voxfcn.evaluation import clip_polygon, ground_plane_polygon, iou_rotated, polygon_area
from voxfcn.voxel import OrientedBox3D

a = OrientedBox3D((0.0, 0.0, 0.0), (4.0, 1.8, 1.5), 0.0)
b = OrientedBox3D((0.8, 0.3, 0.0), (4.2, 1.7, 1.5), math.radians(20))
pa, pb = ground_plane_polygon(a), ground_plane_polygon(b)

inter = clip_polygon(pa, pb)
print(f"intersection has {len(inter)} vertices, area {polygon_area(inter):.4f} m^2")
print(f"IoU {iou_rotated(pa, pb):.4f}")

# brute-force estimate: sample the joint bounding box
rng = np.random.default_rng(0)
lo, hi = np.vstack([pa, pb]).min(0), np.vstack([pa, pb]).max(0)
pts = rng.uniform(lo, hi, (400_000, 2))


def inside(poly):
    ok = np.ones(len(pts), bool)
    for i in range(4):
        p, q = poly[i], poly[(i + 1) % 4]
        ok &= (q[0] - p[0]) * (pts[:, 1] - p[1]) - (q[1] - p[1]) * (pts[:, 0] - p[0]) >= 0
    return ok


ia, ib = inside(pa), inside(pb)
print(f"sampled IoU {np.count_nonzero(ia & ib) / np.count_nonzero(ia | ib):.4f}")
