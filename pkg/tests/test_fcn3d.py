import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxfcn.errors import CheckpointError, DimensionError, TrainingDivergedError
from voxfcn.fcn3d import (
    MAGIC,
    augment_scene,
    ArchConfig,
    OutputMaps,
    TrainConfig,
    backward,
    box_loss,
    foreground_probability,
    forward,
    init_params,
    load_checkpoint,
    objectness_loss,
    sample_objectness_cells,
    save_checkpoint,
    total_loss,
    train,
    train_step,
)
from voxfcn.gradcheck import random_targets
from voxfcn.synth import SceneSpec, generate_scene
from voxfcn.voxel import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    GridSpec,
    OrientedBox3D,
    TargetVolume,
    box_to_label,
    generate_targets,
    label_to_box,
    voxelize,
)

SMALL = ArchConfig(channels=(4, 6, 8), kernels=(3, 3, 3))


def single_cell_targets(label):
    labels = np.full((1, 1, 1), label, dtype=np.int8)
    if label == POSITIVE:
        return TargetVolume(labels, np.zeros((1, 3), np.int64), np.zeros((1, 24), np.float32), np.zeros(1, np.int64))
    return TargetVolume(labels, np.zeros((0, 3), np.int64), np.zeros((0, 24), np.float32), np.zeros(0, np.int64))


@pytest.fixture(scope="module")
def small_scene():
    grid = GridSpec((0.0, -6.4, -3.2), 0.4, (32, 32, 16))
    spec = SceneSpec(n_vehicles=(2, 2), x_range=(4.0, 9.0), y_range=(-4.0, 4.0), clutter_count=2,
                     seed=7, grid=grid)
    cloud, labels, calib = generate_scene(spec)
    return voxelize(cloud, grid), generate_targets(labels, calib, grid)


class TestObjectnessLoss:
    @pytest.mark.parametrize("label", [NEGATIVE, POSITIVE])
    def test_uniform_logits_give_ln2(self, label):
        loss, _ = objectness_loss(np.zeros((2, 1, 1, 1)), single_cell_targets(label))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confident_positive(self):
        o = np.array([5.0, 0.0]).reshape(2, 1, 1, 1)
        loss, _ = objectness_loss(o, single_cell_targets(POSITIVE))
        assert loss == pytest.approx(0.006715348489118, abs=1e-9)
        assert foreground_probability(o).item() == pytest.approx(0.993307149075715, abs=1e-12)

    def test_ignore_contributes_nothing(self):
        loss, grad = objectness_loss(np.array([3.0, -1.0]).reshape(2, 1, 1, 1), single_cell_targets(IGNORE))
        assert loss == 0.0 and not grad.any()

    def test_equals_cross_entropy_of_negated_logits(self, rng):
        o = rng.normal(scale=4, size=(2, 10, 10, 10))
        labels = rng.integers(0, 2, size=(10, 10, 10)).astype(np.int8)
        pos = np.argwhere(labels == POSITIVE)
        tv = TargetVolume(labels, pos, np.zeros((len(pos), 24), np.float32), np.zeros(len(pos), np.int64))
        loss, _ = objectness_loss(o, tv)
        ref = 0.0
        for idx in np.ndindex(labels.shape):
            z = -o[(slice(None), *idx)]
            ref -= z[labels[idx]] - math.log(math.exp(z[0]) + math.exp(z[1]))
        assert loss == pytest.approx(ref, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        o = r.normal(scale=20, size=(2, 3, 3, 3))
        assert objectness_loss(o, random_targets((3, 3, 3), r, n_pos=2))[0] >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            objectness_loss(np.zeros((2, 2, 1, 1)), single_cell_targets(POSITIVE))


class TestBoxLoss:
    def test_perfect_prediction(self, rng):
        tv = random_targets((4, 4, 4), rng)
        assert box_loss(tv.dense_offsets().astype(np.float64), tv)[0] == 0.0

    def test_unit_residual(self):
        tv = single_cell_targets(POSITIVE)
        ob = np.zeros((24, 1, 1, 1))
        ob[5] = 1.0
        loss, grad = box_loss(ob, tv)
        assert loss == 1.0
        assert grad[5].item() == 2.0 and np.count_nonzero(grad) == 1

    def test_only_positive_cells(self, rng):
        tv = random_targets((4, 4, 4), rng, n_pos=3)
        ob = tv.dense_offsets().astype(np.float64)
        ob[:, ~tv.positive_mask] = 100.0
        loss, grad = box_loss(ob, tv)
        assert loss == 0.0 and not grad.any()


class TestTotalLoss:
    def test_w_zero(self, rng):
        tv = random_targets((8, 8, 8), rng)
        maps = OutputMaps(rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(24, 8, 8, 8)))
        parts, go, gb = total_loss(maps, tv, 0.0)
        assert parts.total == objectness_loss(maps.objectness, tv)[0]
        assert not gb.any()

    def test_no_positives(self, rng):
        tv = random_targets((8, 8, 8), rng, n_pos=0)
        maps = OutputMaps(rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(24, 8, 8, 8)))
        assert total_loss(maps, tv, 7.0)[0].total == objectness_loss(maps.objectness, tv)[0]

    def test_weighted_sum(self, rng):
        tv = random_targets((8, 8, 8), rng)
        maps = OutputMaps(rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(24, 8, 8, 8)))
        parts, _, _ = total_loss(maps, tv, 0.3)
        assert parts.total == pytest.approx(parts.objectness + 0.3 * parts.box)


class TestNetwork:
    def test_output_shapes(self):
        params = init_params(0)
        maps, _ = forward(np.zeros((1, 16, 24, 8), np.float32), params)
        assert maps.objectness.shape == (2, 16, 24, 8)
        assert maps.boxmap.shape == (24, 16, 24, 8)

    def test_indivisible_input(self):
        with pytest.raises(DimensionError, match="axis W"):
            forward(np.zeros((1, 16, 12, 8)), init_params(0))

    def test_init_variance(self):
        params = init_params(3)
        for name, arr in params:
            if name.endswith(".bias"):
                assert not arr.any()
                continue
            shape = arr.shape
            k3 = np.prod(shape[2:])
            fan = (shape[1] + shape[0]) * k3
            # uniform on +-sqrt(6/fan) has variance 2/fan
            assert arr.var() == pytest.approx(2.0 / fan, rel=0.1), name

    def test_init_deterministic(self):
        assert init_params(5).equals(init_params(5))
        assert not init_params(5).equals(init_params(6))

    def test_translation_covariance(self, rng):
        # shifting by one coarse cell (8 voxels) shifts the output by 8 voxels
        params = init_params(1, SMALL)
        x = np.zeros((1, 32, 16, 16), np.float32)
        x[0, 8:14, 4:10, 4:10] = rng.random((6, 6, 6)) < 0.5
        shifted = np.roll(x, 8, axis=1)
        a, _ = forward(x, params)
        b, _ = forward(shifted, params)
        np.testing.assert_allclose(b.boxmap[:, 16:24], a.boxmap[:, 8:16], rtol=1e-5, atol=1e-6)

    def test_zero_head_gradients(self, rng):
        params = init_params(0, SMALL)
        _, cache = forward((rng.random((1, 16, 16, 16)) < 0.2).astype(np.float32), params)
        grads = backward(cache, params, np.zeros((2, 16, 16, 16)), np.zeros((24, 16, 16, 16)))
        assert not any(g.any() for g in grads.values())

    def test_stale_cache(self):
        params = init_params(0, SMALL)
        _, cache = forward(np.zeros((1, 16, 16, 16)), params)
        with pytest.raises(DimensionError, match="stale"):
            backward(cache, params, np.zeros((2, 8, 8, 8)), np.zeros((24, 8, 8, 8)))


class TestSampling:
    def test_keeps_all_positives_and_minimum_negatives(self, rng):
        tv = random_targets((16, 16, 16), rng, n_pos=5, ignore_frac=0.1)
        mask = sample_objectness_cells(tv, 8.0, rng)
        assert np.all(mask[tv.positive_mask])
        assert np.count_nonzero(mask & (tv.labels == NEGATIVE)) == 256
        assert not np.any(mask & (tv.labels == IGNORE))

    def test_ratio(self, rng):
        tv = random_targets((16, 16, 16), rng, n_pos=50)
        mask = sample_objectness_cells(tv, 8.0, rng)
        assert np.count_nonzero(mask & (tv.labels == NEGATIVE)) == 400


class TestTraining:
    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], TrainConfig())

    def test_lr_zero_leaves_params(self, small_scene):
        params, _ = train([small_scene], TrainConfig(lr=0.0, epochs=3), SMALL)
        assert params.equals(init_params(0, SMALL))

    def test_deterministic(self, small_scene):
        cfg = TrainConfig(epochs=3, seed=4)
        p1, h1 = train([small_scene] * 2, cfg, SMALL)
        p2, h2 = train([small_scene] * 2, cfg, SMALL)
        assert h1 == h2 and p1.equals(p2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self, small_scene):
        with pytest.raises(TrainingDivergedError):
            train([small_scene], TrainConfig(lr=1e6, epochs=20, momentum=0.0, clip_norm=0.0), SMALL)

    def test_clip_norm_caps_the_step(self, small_scene):
        grid, targets = small_scene
        params = init_params(0, SMALL)
        before = {k: v.copy() for k, v in params}
        cfg = TrainConfig(lr=0.5, momentum=0.0, clip_norm=1e-3, augment_shift=0, augment_mirror=False)
        train_step(params, {}, grid, targets, cfg, np.random.default_rng(0))
        step = math.sqrt(sum(float(np.sum((params.arrays[k].astype(np.float64) - v) ** 2))
                             for k, v in before.items()))
        assert step == pytest.approx(0.5e-3, rel=1e-3)

    def test_overfits_one_scene(self, small_scene):
        losses = []
        cfg = TrainConfig(lr=0.01, epochs=200, lr_decay=1.0, augment_shift=0, augment_mirror=False)
        train([small_scene], cfg, on_step=lambda e, s, parts: losses.append(parts.total))
        assert len(losses) == 200
        assert losses[-1] <= 0.5 * losses[0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(2)
        save_checkpoint(params, tmp_path / "c.bin")
        assert load_checkpoint(tmp_path / "c.bin").equals(params)

    def test_custom_arch_round_trip(self, tmp_path):
        params = init_params(2, SMALL)
        save_checkpoint(params, tmp_path / "c.bin")
        again = load_checkpoint(tmp_path / "c.bin")
        assert again.arch == SMALL and again.equals(params)

    def test_header(self, tmp_path):
        save_checkpoint(init_params(0, SMALL), tmp_path / "c.bin")
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw.startswith(MAGIC + (1).to_bytes(4, "little") + b"4x1x3x3x3,4,6x4x3x3x3,")

    @pytest.mark.parametrize("mutate", [
        lambda b: b"X" + b[1:],
        lambda b: b[:7] + (2).to_bytes(4, "little") + b[11:],
        lambda b: b[:-4],
        lambda b: b + b"\0",
        lambda b: b[:9],
    ])
    def test_corruption(self, tmp_path, mutate):
        path = tmp_path / "c.bin"
        save_checkpoint(init_params(0, SMALL), path)
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


@pytest.fixture(scope="module")
def centered_scene():
    # grid centered on y = 0 so the mirror is y -> -y
    grid = GridSpec((0.0, -6.4, -3.2), 0.4, (32, 32, 16))
    spec = SceneSpec(n_vehicles=(2, 2), x_range=(4.0, 9.0), y_range=(-4.0, 4.0), clutter_count=2,
                     seed=11, grid=grid)
    cloud, labels, calib = generate_scene(spec)
    return grid, voxelize(cloud, grid), labels, calib


class TestAugmentation:
    @pytest.mark.parametrize("shift, mirror", [((0, 0), True), ((2, -3), False), ((-1, 2), True)])
    def test_matches_targets_of_moved_scene(self, centered_scene, shift, mirror):
        grid, vox, labels, calib = centered_scene
        moved = []
        for lab in labels:
            box = label_to_box(lab, calib)
            cx, cy, cz = box.center
            yaw = box.yaw
            if mirror:
                cy, yaw = -cy, -yaw
            cx, cy = cx + 0.4 * shift[0], cy + 0.4 * shift[1]
            moved.append(box_to_label(OrientedBox3D((cx, cy, cz), box.size, yaw), calib, lab.class_name))
        expected = generate_targets(moved, calib, grid)
        x, got = augment_scene(vox.as_input(), generate_targets(labels, calib, grid), shift, mirror)
        np.testing.assert_array_equal(got.labels, expected.labels)
        order = np.lexsort(got.positive_cells.T)
        order_e = np.lexsort(expected.positive_cells.T)
        np.testing.assert_array_equal(got.positive_cells[order], expected.positive_cells[order_e])
        np.testing.assert_allclose(got.positive_offsets[order], expected.positive_offsets[order_e], atol=1e-4)
        assert x.shape == vox.as_input().shape
        assert x.sum() <= vox.data.sum()

    def test_identity(self, small_scene):
        vox, targets = small_scene
        x, got = augment_scene(vox.as_input(), targets)
        np.testing.assert_array_equal(x, vox.as_input())
        np.testing.assert_array_equal(got.labels, targets.labels)
        np.testing.assert_array_equal(got.positive_offsets, targets.positive_offsets)

    def test_shift_drops_cells_pushed_out(self, small_scene):
        vox, targets = small_scene
        _, got = augment_scene(vox.as_input(), targets, (40, 0))
        assert got.n_positive == 0
        assert np.all(got.labels == NEGATIVE)

    def test_augmented_training_is_deterministic(self, small_scene):
        cfg = TrainConfig(epochs=2, augment_shift=3, augment_mirror=True, seed=5)
        p1, h1 = train([small_scene], cfg, SMALL)
        p2, h2 = train([small_scene], cfg, SMALL)
        assert [e.total for e in h1] == [e.total for e in h2]
        for name, arr in p1:
            np.testing.assert_array_equal(arr, p2.arrays[name])
