import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grcn import ConfigurationError, NumericError, Tensor
from grcn.data import generate_scene
from grcn.detector import ProposalSettings, build_model
from grcn.gradcheck import check_gradients
from grcn.training import (COCO_SCHEDULE, VOC_SCHEDULE, RoiTargets, RpnTargets, TrainConfig,
                           assign_roi_targets, assign_rpn_targets, epoch_order, head_losses,
                           init_velocity, label_anchors, lr_at, moving_average, rpn_losses,
                           scene_for_iteration, sgd_momentum_step, stream_rng, train_step)

from oracles import verify_target_assignment

TINY = dict(anchor_sizes=(16, 32), head_hidden=16,
            proposals=ProposalSettings(train_pre_nms=200, train_post_nms=48))


class TestSchedule:
    def test_step_boundaries(self):
        assert lr_at(0, COCO_SCHEDULE) == 0.001
        assert lr_at(239_999, COCO_SCHEDULE) == 0.001
        assert lr_at(240_000, COCO_SCHEDULE) == 0.0001
        assert lr_at(149_999, VOC_SCHEDULE) == 0.001
        assert lr_at(150_000, VOC_SCHEDULE) == 0.0001

    def test_past_last_bound_keeps_last_rate(self):
        assert lr_at(10**7, VOC_SCHEDULE) == 0.0001

    def test_bad_schedule(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(lr_schedule=((10, 0.1), (5, 0.01)))


class TestSGD:
    def test_momentum_update_by_hand(self):
        w = Tensor(np.array([1.0, 2.0]))
        v = {"w": np.zeros(2)}
        g = np.array([0.5, -1.0])
        sgd_momentum_step({"w": w}, {"w": g}, v, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(w.data, [0.95, 2.1])
        sgd_momentum_step({"w": w}, {"w": g}, v, lr=0.1, momentum=0.9)
        # v = 0.9 * g + g = 1.9 g
        np.testing.assert_allclose(v["w"], 1.9 * g)
        np.testing.assert_allclose(w.data, [0.95 - 0.095, 2.1 + 0.19])

    def test_weight_decay(self):
        w = Tensor(np.array([2.0]))
        v = {"w": np.zeros(1)}
        sgd_momentum_step({"w": w}, {"w": np.zeros(1)}, v, lr=0.5, momentum=0.0, weight_decay=0.1)
        np.testing.assert_allclose(w.data, [1.9])


class TestTargets:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_exhaustive_reassignment(self, seed):
        assert verify_target_assignment(seed)

    def test_best_anchor_per_gt_is_foreground(self):
        anchors = np.array([[0, 0, 10, 10], [100, 100, 110, 110]], dtype=float)
        gt = np.array([[0, 0, 30, 30]], dtype=float)  # best IoU 1/9 < 0.7
        labels, _ = label_anchors(anchors, gt, TrainConfig())
        assert labels.tolist() == [1, 0]

    def test_no_gt_gives_all_background(self):
        grid = np.array([[0, 0, 10, 10], [5, 5, 20, 20]], dtype=float)
        t = assign_rpn_targets(grid, np.zeros((0, 4)), TrainConfig(), stream_rng(0))
        assert t.labels.tolist() == [0, 0]
        r = assign_roi_targets(grid, np.zeros((0, 4)), np.zeros(0), TrainConfig(), stream_rng(0))
        assert (r.labels == 0).all()

    def test_sampling_caps(self):
        rng = np.random.default_rng(0)
        gts = np.array([[20, 20, 60, 60]], dtype=float)
        props = np.repeat(gts, 400, axis=0) + rng.normal(0, 1, (400, 4))
        cfg = TrainConfig(roi_batch=32, fg_fraction=0.25)
        r = assign_roi_targets(props, gts, [1], cfg, stream_rng(0))
        assert (r.labels > 0).sum() == 8
        assert (r.labels == 2).all()

    def test_sampling_is_seeded(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 100, (500, 2))
        props = np.hstack([xy, xy + 30])
        gts = np.array([[10, 10, 50, 50], [60, 60, 100, 100]], dtype=float)
        a = assign_roi_targets(props, gts, [0, 1], TrainConfig(), stream_rng(3, 1))
        b = assign_roi_targets(props, gts, [0, 1], TrainConfig(), stream_rng(3, 1))
        np.testing.assert_array_equal(a.rois, b.rois)


class TestLosses:
    def test_rpn_losses_are_normalised_by_batch(self):
        obj = Tensor(np.zeros((5, 2)), requires_grad=True)
        dlt = Tensor(np.zeros((5, 4)), requires_grad=True)
        t = RpnTargets(np.array([0, 3]), np.array([1, 0]), np.array([[0.5, 0, 0, 2.0], [0, 0, 0, 0]]))
        c, r = rpn_losses(obj, dlt, t)
        assert c.item() == pytest.approx(np.log(2))
        assert r.item() == pytest.approx((0.125 + 1.5) / 2)

    def test_head_loss_uses_class_specific_deltas(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        pred = Tensor(rng.standard_normal((3, 12)), requires_grad=True)
        t = RoiTargets(np.zeros((3, 4)), np.array([2, 0, 1]), rng.standard_normal((3, 4)), np.array([0, -1, 1]))
        err = check_gradients(lambda: head_losses(logits, pred, t)[1], [pred])
        assert err < 1e-6
        _, loc = head_losses(logits, pred, t)
        loc.backward()
        assert not pred.grad[1].any()
        assert not pred.grad[0, :8].any() and pred.grad[0, 8:].any()


class TestTrainStep:
    def test_bit_exact_determinism(self):
        scene = generate_scene(1, 0, 3, (64, 64))
        cfg = TrainConfig(lr_schedule=((100, 0.01),), shorter_side=None, rpn_batch=32, roi_batch=16)
        runs = []
        for _ in range(2):
            m = build_model("grcn", "toy-vgg", 3, seed=4, **TINY)
            v = init_velocity(m.parameters)
            losses = [train_step(m, scene, v, cfg, it).loss for it in range(3)]
            runs.append((losses, {n: t.data.copy() for n, t in m.parameters.items()}))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])

    def test_loss_decreases_when_overfitting_one_scene(self):
        scene = generate_scene(2, 0, 3, (64, 64))
        cfg = TrainConfig(lr_schedule=((100, 0.01),), shorter_side=None, flip=False)
        m = build_model("baseline", "toy-vgg", 3, **TINY)
        v = init_velocity(m.parameters)
        losses = [train_step(m, scene, v, cfg, it).loss for it in range(30)]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_non_finite_loss_raises(self):
        scene = generate_scene(1, 0, 3, (64, 64))
        cfg = TrainConfig(shorter_side=None)
        m = build_model("baseline", "toy-vgg", 3, **TINY)
        m.parameters["cls_score.weight"].data[:] = np.nan
        with pytest.raises(NumericError):
            train_step(m, scene, init_velocity(m.parameters), cfg, 0)


class TestOrdering:
    @given(st.integers(0, 1000), st.integers(1, 50))
    def test_each_epoch_is_a_permutation(self, seed, n):
        seen = sorted(scene_for_iteration(seed, it, n) for it in range(n))
        assert seen == list(range(n))
        np.testing.assert_array_equal(epoch_order(seed, 0, n), epoch_order(seed, 0, n))

    def test_moving_average(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
        assert moving_average([1.0], 3).size == 0

    @settings(max_examples=20)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 10**6))
    def test_stream_rng_is_keyed(self, seed, it):
        a = stream_rng(seed, 1, it).random(3)
        np.testing.assert_array_equal(a, stream_rng(seed, 1, it).random(3))
        assert not np.array_equal(a, stream_rng(seed, 1, it + 1).random(3))
