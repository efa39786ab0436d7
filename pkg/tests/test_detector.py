import numpy as np
import pytest

from grcn import ConfigurationError, StateError, Tensor
from grcn.boxes import generate_anchors
from grcn.detector import (BACKBONES, VARIANTS, ModelGraph, ProposalSettings, build_model, describe,
                           effective_stride, forward_detect, select_proposals)
from grcn.training import TrainConfig, compute_loss, stream_rng
from grcn.data import generate_scene

SMALL = dict(anchor_sizes=(16, 32), head_hidden=32,
             proposals=ProposalSettings(train_pre_nms=300, train_post_nms=64, test_pre_nms=300, test_post_nms=32))


def pairs():
    for b in BACKBONES:
        for v in VARIANTS:
            if not (v == "resnet_det" and b == "toy-vgg"):
                yield v, b


def image(seed=0, size=64):
    return Tensor(np.random.default_rng(seed).standard_normal((1, 3, size, size)))


class TestConstruction:
    @pytest.mark.parametrize("variant,backbone", list(pairs()))
    def test_every_variant_builds_and_runs(self, variant, backbone):
        m = build_model(variant, backbone, 3, **SMALL)
        dets = forward_detect(m, image(), "test")
        assert dets.boxes.shape[1] == 4
        assert dets.boxes.shape[0] == dets.scores.shape[0] == dets.labels.shape[0]
        assert set(dets.labels.tolist()) <= {0, 1, 2}
        assert (np.diff(dets.scores) <= 0).all()

    def test_resnet_det_not_defined_for_vgg(self):
        with pytest.raises(ConfigurationError):
            build_model("resnet_det", "toy-vgg", 3)

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError, match="variant"):
            build_model("fancy", "toy-vgg", 3)

    def test_parameter_count_detect_s_equals_detect_rf(self):
        for backbone in BACKBONES:
            s = build_model("detect_s", backbone, 3).num_parameters()
            rf = build_model("detect_rf", backbone, 3).num_parameters()
            assert s == rf

    def test_strides(self):
        g = build_model("grcn", "toy-vgg", 3)
        assert (g.cls_stride, g.loc_stride) == (16, 8)
        assert build_model("baseline", "toy-vgg", 3).cls_stride == 16
        assert build_model("detect_f", "toy-vgg", 3).loc_stride == 16
        r = build_model("resnet_det", "toy-resnet", 3)
        assert effective_stride(r.branch_spec.shared_layers) == 16
        r2 = build_model("resnet_det", "toy-resnet", 3, det_last_stride=2)
        assert effective_stride(r2.branch_spec.shared_layers) == 32
        gr = build_model("grcn", "toy-resnet", 3)
        assert gr.loc_stride * 2 == gr.cls_stride == 16

    @pytest.mark.parametrize("loc_last,stride", [("pool", 16), ("remove", 8), ("conv", 16), ("pool_s1", 8)])
    def test_loc_last_layer_options(self, loc_last, stride):
        assert build_model("grcn", "toy-vgg", 3, loc_last=loc_last).loc_stride == stride

    def test_resnet_grcn_shares_split_block_weights(self):
        m = build_model("grcn", "toy-resnet", 3)
        assert any(n.startswith("res3a.") for n in m.parameters)
        assert not any(n.startswith(("cls.res3a", "loc.res3a")) for n in m.parameters)

    def test_seeded_init_is_deterministic(self):
        a = build_model("grcn", "toy-vgg", 3, seed=5)
        b = build_model("grcn", "toy-vgg", 3, seed=5)
        c = build_model("grcn", "toy-vgg", 3, seed=6)
        assert all(np.array_equal(a.parameters[n].data, b.parameters[n].data) for n in a.parameters)
        assert not np.array_equal(a.parameters["conv1.weight"].data, c.parameters["conv1.weight"].data)

    def test_unbuilt_model(self):
        with pytest.raises(StateError):
            forward_detect(ModelGraph(), image())

    def test_describe(self):
        text = describe(build_model("grcn", "toy-vgg", 3))
        assert "cls_stride=16 loc_stride=8" in text
        m = build_model("resnet_det", "toy-resnet", 3)
        text = describe(m)
        assert "trunk_stride=16" in text
        assert "head.fc1" in text and "head.fc2" in text
        assert text.strip().endswith(f"total_params={m.num_parameters()}")


class TestBranchIsolation:
    @pytest.mark.parametrize("variant,backbone", [("grcn", "toy-vgg"), ("detect_f", "toy-vgg"),
                                                  ("grcn", "toy-resnet"), ("detect_rf", "toy-vgg")])
    def test_task_losses_do_not_reach_other_branch(self, variant, backbone):
        m = build_model(variant, backbone, 3, **SMALL)
        scene = generate_scene(3, 0, 3, (64, 64))
        cfg = TrainConfig(shorter_side=None, rpn_batch=32, roi_batch=16, flip=False)
        for term, other in (("cls", "loc"), ("loc", "cls")):
            m.zero_grad()
            loss, _ = compute_loss(m, scene, cfg, stream_rng(0, 1), False, terms=(term,))
            loss.total.backward()
            exclusive = m.exclusive_parameters(other)
            assert exclusive
            for name in exclusive:
                assert not m.parameters[name].grad.any(), name
            own = m.exclusive_parameters(term)
            assert any(m.parameters[n].grad.any() for n in own)


class TestProposals:
    def test_select_proposals_contract(self):
        grid = generate_anchors(4, 4, 16, [16, 32], [1.0])
        rng = np.random.default_rng(0)
        obj = rng.standard_normal((len(grid), 2))
        deltas = rng.standard_normal((len(grid), 4)) * 0.1
        boxes, scores = select_proposals(obj, deltas, grid, (64, 64), 20, 10, 0.7)
        assert boxes.shape[0] <= 10 and scores.shape == (boxes.shape[0],)
        assert (boxes >= 0).all() and (boxes <= 64).all()
        assert (np.diff(scores) <= 0).all()
