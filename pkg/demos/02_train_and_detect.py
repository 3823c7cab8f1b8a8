"""Train a small network for a few epochs and look at what it detects.

This is deliberately short (about a minute on one core) so the numbers are
rough; the acceptance run trains the default network on 200 scenes.
"""

import numpy as np

from voxfcn.evaluation import Frame, evaluate_all
from voxfcn.fcn3d import TrainConfig, forward, train
from voxfcn.inference import detect
from voxfcn.synth import SYNTH_GRID, SceneSpec, generate_scene
from voxfcn.voxel import generate_targets, voxelize

train_raw = [generate_scene(SceneSpec(seed=s)) for s in range(40)]
test_raw = [generate_scene(SceneSpec(seed=50_000 + s)) for s in range(10)]
scenes = [(voxelize(c, SYNTH_GRID), generate_targets(l, cal, SYNTH_GRID)) for c, l, cal in train_raw]

params, history = train(scenes, TrainConfig(epochs=10, lr_decay=0.85))
for e in history:
    print(f"epoch {e.epoch}: objectness {e.objectness:7.2f}  box {e.box:7.2f}")

frames = []
for n, (cloud, labels, calib) in enumerate(test_raw):
    maps, _ = forward(voxelize(cloud, SYNTH_GRID), params)
    cands, _, kept = detect(maps, SYNTH_GRID)
    frames.append(Frame(str(n), kept, labels, calib))
    if n < 3:
        print(f"scene {n}: {len(labels)} vehicles, {len(cands)} candidates, {len(kept)} after suppression")

print(evaluate_all(frames, iou_threshold=0.5).format_table())
print("mean detections per scene:", np.mean([len(f.detections) for f in frames]))
