from dataclasses import replace
from itertools import product

import numpy as np
import pytest

from gmgenet.densenet3d import build_model, small_config
from gmgenet.gradcam import (
    Heatmap,
    NoBodyError,
    NoSignalError,
    VOIBox,
    body_mask,
    channel_weights,
    compute_cam,
    extract_voi,
    gradcam,
    heat_centroid,
    largest_component,
    place_box,
    refine_mask,
    upsample_to_input,
)
from gmgenet.interp import aligned_positions, resize_trilinear
from gmgenet.nn import DimensionError, Tensor, numerical_grad
from gmgenet.nn import ops
from oracles import flood_fill_largest, weighted_centroid_loop


def loop_weights(grad):
    _, k, d, h, w = grad.shape
    out = np.zeros(k)
    for c in range(k):
        total = 0.0
        for z, y, x in product(range(d), range(h), range(w)):
            total += grad[0, c, z, y, x]
        out[c] = total / (d * h * w)
    return out


def loop_cam(act, weights):
    _, k, d, h, w = act.shape
    cam = np.zeros((d, h, w))
    for z, y, x in product(range(d), range(h), range(w)):
        s = sum(weights[c] * act[0, c, z, y, x] for c in range(k))
        cam[z, y, x] = max(s, 0.0)
    return cam


class TestWeightsAndCam:
    def test_random_instances_match_loops(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            shape = (1, int(rng.integers(1, 5)), *rng.integers(1, 5, size=3))
            act, grad = rng.normal(size=shape), rng.normal(size=shape)
            w = channel_weights(act, grad)
            assert np.allclose(w, loop_weights(grad), rtol=1e-12, atol=1e-12)
            assert np.allclose(compute_cam(act, w), loop_cam(act, w), rtol=1e-12, atol=1e-12)

    def test_single_channel_identity(self):
        act = np.random.default_rng(1).uniform(0, 1, size=(1, 1, 2, 3, 4))
        assert np.allclose(compute_cam(act, [1.0]), act[0, 0])

    def test_uniform_gradient(self):
        act = np.ones((1, 2, 2, 2, 2))
        grad = np.full((1, 2, 2, 2, 2), 0.25)
        assert np.allclose(channel_weights(act, grad), 0.25)

    def test_all_negative_weights_give_zero(self):
        act = np.abs(np.random.default_rng(2).normal(size=(1, 3, 2, 2, 2)))
        assert np.all(compute_cam(act, [-1.0, -2.0, -0.5]) == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            channel_weights(np.zeros((1, 2, 2, 2, 2)), np.zeros((1, 3, 2, 2, 2)))
        with pytest.raises(DimensionError):
            compute_cam(np.zeros((1, 2, 2, 2, 2)), [1.0])


class TestGradcamOnModel:
    def _model(self, seed=0):
        cfg = replace(small_config(seed=seed, input_shape=(1, 8, 8, 8)), stem_stride=2, transitions=(False, False))
        model = build_model(cfg)
        model.eval()
        return model

    def test_weights_match_finite_difference_of_head(self):
        """Score gradient at the activation, taken numerically through the pooled linear head."""
        model = self._model()
        vol = np.random.default_rng(3).uniform(0, 1, size=(8, 8, 8)).astype(np.float32)
        res = gradcam(model, vol)
        act = model.features(Tensor(vol[None, None])).data.astype(np.float64)

        def head(a):
            w = Tensor(model.fc_weight.data.astype(np.float64), dtype=np.float64)
            b = Tensor(model.fc_bias.data.astype(np.float64), dtype=np.float64)
            return ops.linear(ops.globalavgpool3d(a), w, b).sum()

        num = numerical_grad(head, act)
        assert np.allclose(res.weights, num[0].reshape(num.shape[1], -1).mean(axis=1), atol=1e-8)
        assert np.allclose(res.raw_cam, loop_cam(act, res.weights), atol=1e-5)

    def test_heatmap_normalized_and_aligned(self):
        model = self._model(1)
        vol = np.random.default_rng(4).uniform(0, 1, size=(8, 8, 8))
        res = gradcam(model, vol)
        assert res.heatmap.shape == (8, 8, 8)
        assert res.heatmap.values.min() >= 0
        assert res.heatmap.values.max() in (0.0, 1.0)
        assert 0 < res.probability < 1

    def test_leaves_model_clean(self):
        model = self._model(2)
        model.train()
        gradcam(model, np.zeros((8, 8, 8)))
        assert model.training
        assert all(p.grad is None for p in model.parameters())


class TestUpsample:
    def test_constant_stays_constant(self):
        hm = upsample_to_input(np.full((3, 3, 3), 0.4), (9, 7, 5))
        assert np.all(hm.values == 1.0)

    def test_corners_preserved(self):
        raw = np.random.default_rng(5).uniform(size=(2, 3, 4))
        up = resize_trilinear(raw, (5, 7, 9))
        for z, y, x in product((0, -1), repeat=3):
            assert up[z, y, x] == pytest.approx(raw[z, y, x])

    def test_aligned_positions(self):
        assert np.allclose(aligned_positions(3, 5), [0, 0.5, 1, 1.5, 2])
        assert np.allclose(aligned_positions(1, 4), 0)

    def test_zero_cam(self):
        hm = upsample_to_input(np.zeros((2, 2, 2)), (4, 4, 4))
        assert np.all(hm.values == 0)


class TestRefine:
    def test_largest_component_matches_flood_fill(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            mask = rng.uniform(size=tuple(rng.integers(2, 7, size=3))) < rng.uniform(0.2, 0.6)
            ref, sizes = flood_fill_largest(mask, return_sizes=True)
            got = largest_component(mask)
            assert got.sum() == ref.sum()
            assert not np.any(got & ~mask)
            if sizes and sizes.count(max(sizes)) == 1:
                assert np.array_equal(got, ref)

    def test_outside_body_zeroed(self):
        vol = np.zeros((4, 4, 4))
        vol[1:3, 1:3, 1:3] = 0.5
        hm = Heatmap(np.ones((4, 4, 4)), (2, 2, 2))
        out = refine_mask(hm, vol)
        assert np.array_equal(out.values > 0, vol > 0)

    def test_only_largest_body_component(self):
        vol = np.zeros((6, 6, 6))
        vol[0:3, 0:3, 0:3] = 1.0
        vol[5, 5, 5] = 1.0
        out = refine_mask(Heatmap(np.ones((6, 6, 6)), (6, 6, 6)), vol)
        assert out.values[5, 5, 5] == 0 and out.values.sum() == 27

    def test_empty_body(self):
        with pytest.raises(NoBodyError):
            body_mask(np.zeros((3, 3, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            refine_mask(Heatmap(np.ones((2, 2, 2)), (2, 2, 2)), np.ones((3, 3, 3)))


class TestVOI:
    def test_centroid_matches_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            values = rng.uniform(size=tuple(rng.integers(2, 8, size=3)))
            thr = float(rng.uniform(0.2, 0.9))
            assert np.allclose(heat_centroid(values, thr), weighted_centroid_loop(values, thr), atol=1e-12)

    def test_box_centered_and_exact_size(self):
        box = place_box((10.0, 20.0, 30.0), (8, 6, 4), (40, 40, 40))
        assert box.extent == (8, 6, 4)
        assert (box.z0, box.y0, box.x0) == (8, 17, 26)

    def test_box_shifted_into_bounds(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            shape = tuple(int(s) for s in rng.integers(4, 20, size=3))
            ext = tuple(int(rng.integers(1, s + 1)) for s in shape[::-1])
            center = rng.uniform(-5, 25, size=3)
            box = place_box(center, ext, shape)
            assert box.extent == ext
            assert box.z0 >= 0 and box.y0 >= 0 and box.x0 >= 0
            assert box.z1 <= shape[0] and box.y1 <= shape[1] and box.x1 <= shape[2]

    def test_box_too_large(self):
        with pytest.raises(DimensionError):
            place_box((1, 1, 1), (5, 5, 5), (4, 8, 8))

    def test_extract_crops_hot_region(self):
        vol = np.random.default_rng(9).uniform(size=(20, 20, 20)).astype(np.float32)
        values = np.zeros((20, 20, 20))
        values[12:15, 4:7, 8:11] = 1.0
        box, crop = extract_voi(Heatmap(values, (5, 5, 5)), vol, (6, 6, 6))
        assert crop.shape == (6, 6, 6)
        assert (box.z0, box.y0, box.x0) == (10, 2, 6)
        assert np.array_equal(crop, vol[box.slices])

    def test_no_signal(self):
        with pytest.raises(NoSignalError):
            extract_voi(Heatmap(np.zeros((5, 5, 5)), (5, 5, 5)), np.ones((5, 5, 5)), (2, 2, 2))
        with pytest.raises(NoSignalError):
            extract_voi(Heatmap(np.full((5, 5, 5), 0.01), (5, 5, 5)), np.ones((5, 5, 5)), (2, 2, 2))

    def test_iou(self):
        a = VOIBox(0, 2, 0, 2, 0, 2, (2, 2, 2))
        b = VOIBox(1, 3, 0, 2, 0, 2, (2, 2, 2))
        assert a.iou(a) == 1.0
        assert a.iou(b) == pytest.approx(4 / 12)
        assert a.iou(VOIBox(5, 6, 5, 6, 5, 6, (1, 1, 1))) == 0.0
