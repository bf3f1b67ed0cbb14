import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopfuse.detector import (
    ANCHOR_ROTATIONS,
    ClassAnchor,
    ClassHead,
    DEFAULT_ANCHORS,
    DEFAULT_MATCHING,
    LossConfig,
    decode_box,
    detection_loss,
    encode_box,
    flatten_head_output,
    focal_loss_terms,
    generate_anchors,
    match_anchors,
    predict_class,
)
from coopfuse.geometry import Box7, wrap_angle
from coopfuse.nn import SGD
from coopfuse.pillars import GridSpec
from coopfuse.tensor import Tensor

GRID = GridSpec(x_range=(-19.2, 19.2), y_range=(-19.2, 19.2), z_range=(-3.0, 1.0), resolution=1.2)
VEH = DEFAULT_ANCHORS["vehicle"]
PED = DEFAULT_ANCHORS["pedestrian"]


def _anchor_box(x=0.0, y=0.0, theta=0.0, prior=VEH, cls="vehicle"):
    return Box7(x=x, y=y, z=prior.z_center, w=prior.width, l=prior.length, h=prior.height, theta=theta, cls=cls)


class TestAnchors:
    def test_default_priors(self):
        assert (VEH.length, VEH.width, VEH.height) == (3.9, 1.6, 1.56)
        assert (PED.length, PED.width, PED.height) == (0.6, 0.6, 1.7)

    def test_grid_layout(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        assert len(anchors) == 16 * 16 * 2
        # first two anchors share the first cell center, rotations 0 and pi/2
        a0, a1 = anchors[0], anchors[1]
        assert (a0.x, a0.y) == (a1.x, a1.y)
        assert a0.theta == 0.0 and abs(a1.theta - np.pi / 2) <= 1e-12
        cell = 2.0 * GRID.resolution
        assert a0.x == GRID.x_range[0] + 0.5 * cell
        # the iy index advances fastest after rotation
        assert abs(anchors[2].y - a0.y - cell) <= 1e-12

    def test_anchor_cells_cover_grid(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        xs = sorted({a.x for a in anchors})
        assert len(xs) == 16
        assert abs(xs[0] - (-19.2 + 1.2)) <= 1e-12
        assert abs(xs[-1] - (19.2 - 1.2)) <= 1e-12

    def test_prior_validation(self):
        with pytest.raises(ValueError):
            ClassAnchor(length=0.0, width=1.0, height=1.0, z_center=0.0)


class TestCodec:
    def test_unit_x_offset(self):
        anchor = _anchor_box()
        gt = Box7(1.0, 0.0, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        delta = encode_box(gt, anchor)
        d = np.hypot(3.9, 1.6)
        assert abs(delta[0] - 1.0 / d) <= 1e-12
        assert abs(delta[0] - 0.2372) <= 1e-4
        assert np.abs(delta[1:]).max() <= 1e-12

    def test_dimension_log_encoding(self):
        anchor = _anchor_box()
        gt = Box7(0.0, 0.0, 0.0, 2 * VEH.width, VEH.length, VEH.height, 0.0)
        delta = encode_box(gt, anchor)
        assert abs(delta[3] - np.log(2.0)) <= 1e-12

    def test_z_normalized_by_height(self):
        anchor = _anchor_box()
        gt = Box7(0.0, 0.0, 0.78, VEH.width, VEH.length, VEH.height, 0.0)
        assert abs(encode_box(gt, anchor)[2] - 0.5) <= 1e-12

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            anchor = _anchor_box(
                x=rng.uniform(-10, 10), y=rng.uniform(-10, 10), theta=ANCHOR_ROTATIONS[rng.integers(2)]
            )
            gt = Box7(
                x=rng.uniform(-10, 10),
                y=rng.uniform(-10, 10),
                z=rng.uniform(-1, 1),
                w=rng.uniform(0.5, 3),
                l=rng.uniform(0.5, 5),
                h=rng.uniform(0.5, 2),
                theta=rng.uniform(-np.pi, np.pi),
            )
            back = decode_box(encode_box(gt, anchor), anchor)
            assert np.abs(np.array(back.as_list()) - np.array(gt.as_list())).max() <= 1e-10

    def test_degenerate_gt_rejected(self):
        with pytest.raises(ValueError):
            Box7(0, 0, 0, -1.0, 1.0, 1.0, 0.0)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-np.pi, np.pi))
    @settings(max_examples=40)
    def test_decode_encode_identity(self, dx, dy, theta):
        anchor = _anchor_box()
        gt = Box7(dx, dy, 0.2, 1.7, 4.1, 1.5, theta)
        back = decode_box(encode_box(gt, anchor), anchor)
        assert abs(back.x - gt.x) <= 1e-10
        assert abs(wrap_angle(back.theta - gt.theta)) <= 1e-10


class TestMatching:
    def test_thresholds(self):
        assert DEFAULT_MATCHING["vehicle"].positive == 0.6
        assert DEFAULT_MATCHING["vehicle"].negative == 0.45
        assert DEFAULT_MATCHING["pedestrian"].positive == 0.5
        assert DEFAULT_MATCHING["pedestrian"].negative == 0.35

    def test_no_gts_all_negative(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        t = match_anchors(anchors, [], DEFAULT_MATCHING["vehicle"])
        assert (t.labels == 0).all()
        assert t.num_positive == 0

    def test_exact_overlap_positive(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(anchors[0].x, anchors[0].y, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        t = match_anchors(anchors, [gt], DEFAULT_MATCHING["vehicle"])
        assert t.labels[0] == 1
        assert t.matched_gt[0] == 0
        assert np.abs(t.deltas[0]).max() <= 1e-12

    def test_ignore_band(self):
        # an anchor with IoU strictly between the thresholds is ignored;
        # shift the gt along x until IoU lands inside (0.45, 0.6)
        anchor = _anchor_box()
        from coopfuse.metrics import iou_bev

        shift = 1.2
        gt = Box7(shift, 0.0, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        v = iou_bev(anchor, gt)
        assert 0.45 < v < 0.6
        # add a second distant anchor so the force match lands elsewhere
        far = _anchor_box(x=shift, y=0.0)
        t = match_anchors([anchor, far], [gt], DEFAULT_MATCHING["vehicle"])
        assert t.labels[0] == -1
        assert t.labels[1] == 1

    def test_force_match_below_threshold(self):
        # a lone gt with weak IoU everywhere still claims its argmax anchor
        anchors = generate_anchors(GRID, PED, "pedestrian")
        gt = Box7(0.3, 0.3, 0.0, PED.width, PED.length, PED.height, 0.4, cls="pedestrian")
        t = match_anchors(anchors, [gt], DEFAULT_MATCHING["pedestrian"])
        assert t.num_positive >= 1

    def test_positive_deltas_decode_to_gt(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(2.3, -1.1, 0.2, 1.7, 4.0, 1.5, 0.25)
        t = match_anchors(anchors, [gt], DEFAULT_MATCHING["vehicle"])
        for i in np.flatnonzero(t.labels == 1):
            back = decode_box(t.deltas[i], anchors[i])
            assert abs(back.x - gt.x) <= 1e-10
            assert abs(back.l - gt.l) <= 1e-10

    def test_two_gts_both_matched(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        g1 = Box7(-6.0, -6.0, 0.0, 1.6, 3.9, 1.56, 0.0)
        g2 = Box7(6.0, 6.0, 0.0, 1.6, 3.9, 1.56, np.pi / 2)
        t = match_anchors(anchors, [g1, g2], DEFAULT_MATCHING["vehicle"])
        assert set(t.matched_gt[t.labels == 1]) == {0, 1}


class TestFocal:
    def test_midpoint_value(self):
        # pt = 0.5: loss = 0.25 * 0.25 * log(2) = 0.04332169...
        out = focal_loss_terms(Tensor([0.0]), np.array([True]), LossConfig())
        assert abs(out.data[0] - 0.043322) <= 1e-6
        out_neg = focal_loss_terms(Tensor([0.0]), np.array([False]), LossConfig())
        assert abs(out_neg.data[0] - 0.043322) <= 1e-6

    def test_confident_correct_is_cheap(self):
        sure = focal_loss_terms(Tensor([8.0]), np.array([True]), LossConfig()).data[0]
        unsure = focal_loss_terms(Tensor([0.0]), np.array([True]), LossConfig()).data[0]
        wrong = focal_loss_terms(Tensor([-8.0]), np.array([True]), LossConfig()).data[0]
        assert sure < unsure < wrong

    def test_extreme_logits_stay_finite(self):
        out = focal_loss_terms(Tensor([-80.0, 80.0]), np.array([True, False]), LossConfig())
        assert np.isfinite(out.data).all()
        assert (out.data > 0).all()

    def test_gamma_suppresses_easy_negatives(self):
        focal = focal_loss_terms(Tensor([-3.0]), np.array([False]), LossConfig(gamma=2.0)).data[0]
        plain = focal_loss_terms(Tensor([-3.0]), np.array([False]), LossConfig(gamma=0.0)).data[0]
        assert focal < 0.1 * plain

    def test_gradient_finite(self):
        logits = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
        focal_loss_terms(logits, np.array([True, False, True]), LossConfig()).sum().backward()
        assert np.isfinite(logits.grad).all()


class TestLoss:
    def _targets(self, anchors, gts):
        return match_anchors(anchors, gts, DEFAULT_MATCHING["vehicle"])

    def test_no_positives_cls_only(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        t = self._targets(anchors, [])
        n = len(anchors)
        logits = Tensor(np.zeros(n), requires_grad=True)
        deltas = Tensor(np.zeros((n, 7)))
        loss = detection_loss(logits, deltas, t, LossConfig())
        # all anchors negative at p = 0.5, normalized by the anchor count
        assert abs(loss.item() - 0.043322) <= 1e-5

    def test_perfect_regression_zero_reg_term(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(anchors[10].x, anchors[10].y, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        t = self._targets(anchors, [gt])
        logits = Tensor(np.where(t.labels == 1, 40.0, -40.0))
        deltas = Tensor(t.deltas.copy())
        loss = detection_loss(logits, deltas, t, LossConfig()).item()
        assert loss <= 1e-4

    def test_reg_weight_is_two(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(anchors[10].x, anchors[10].y, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        t = self._targets(anchors, [gt])
        logits = Tensor(np.where(t.labels == 1, 40.0, -40.0))
        wrong = t.deltas.copy()
        wrong[t.labels == 1, 0] += 0.5  # adds smooth_l1(0.5) = 0.125 per positive
        base = detection_loss(logits, Tensor(t.deltas.copy()), t, LossConfig()).item()
        bumped = detection_loss(logits, Tensor(wrong), t, LossConfig()).item()
        assert abs((bumped - base) - 2.0 * 0.125) <= 1e-9

    def test_angle_term_uses_sine(self):
        # a pi heading error has sin = 0, so it costs nothing: the box
        # footprint is identical either way
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(anchors[10].x, anchors[10].y, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        t = self._targets(anchors, [gt])
        logits = Tensor(np.where(t.labels == 1, 40.0, -40.0))
        flipped = t.deltas.copy()
        flipped[t.labels == 1, 6] += np.pi
        base = detection_loss(logits, Tensor(t.deltas.copy()), t, LossConfig()).item()
        flip = detection_loss(logits, Tensor(flipped), t, LossConfig()).item()
        assert abs(flip - base) <= 1e-9

    def test_ignored_anchors_excluded(self):
        # flipping an ignored anchor's logit must not change the loss
        anchor = _anchor_box()
        far = _anchor_box(x=1.2)
        gt = Box7(1.2, 0.0, 0.0, VEH.width, VEH.length, VEH.height, 0.0)
        t = match_anchors([anchor, far], [gt], DEFAULT_MATCHING["vehicle"])
        assert t.labels[0] == -1
        deltas = Tensor(t.deltas.copy())
        a = detection_loss(Tensor(np.array([5.0, 3.0])), deltas, t, LossConfig()).item()
        b = detection_loss(Tensor(np.array([-5.0, 3.0])), deltas, t, LossConfig()).item()
        assert abs(a - b) <= 1e-12

    def test_loss_positive_and_finite(self):
        rng = np.random.default_rng(1)
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(1.0, 2.0, 0.1, 1.7, 4.0, 1.5, 0.3)
        t = self._targets(anchors, [gt])
        logits = Tensor(rng.normal(size=len(anchors)))
        deltas = Tensor(rng.normal(size=(len(anchors), 7)))
        loss = detection_loss(logits, deltas, t, LossConfig()).item()
        assert np.isfinite(loss) and loss > 0


class TestHead:
    def test_channel_counts(self):
        head = ClassHead(np.random.default_rng(0), in_channels=32)
        assert head.cls_conv.weight.shape == (2, 32, 1, 1)
        assert head.reg_conv.weight.shape == (14, 32, 1, 1)

    def test_background_prior_bias(self):
        head = ClassHead(np.random.default_rng(1), in_channels=8)
        p = 1.0 / (1.0 + np.exp(-head.cls_conv.bias.data))
        assert np.allclose(p, 0.01, atol=1e-12)

    def test_flatten_matches_anchor_order(self):
        # mark a single output cell and rotation; the flat index must be
        # (ix * W + iy) * B + rotation
        b, h, w = 2, 4, 4
        cls_map = np.zeros((b, h, w))
        cls_map[1, 2, 3] = 7.0
        reg_map = np.zeros((7 * b, h, w))
        reg_map[7 + 4, 2, 3] = 5.0  # rotation 1, component 4
        logits, deltas = flatten_head_output(Tensor(cls_map), Tensor(reg_map))
        flat = (2 * w + 3) * b + 1
        assert logits.data[flat] == 7.0
        assert logits.data.sum() == 7.0
        assert deltas.data[flat, 4] == 5.0
        assert deltas.data.sum() == 5.0

    def test_head_trains_to_halve_loss(self):
        # 100 SGD steps on a fixed map must cut the detection loss in half
        rng = np.random.default_rng(2)
        grid = GridSpec(x_range=(-9.6, 9.6), y_range=(-9.6, 9.6), z_range=(-3.0, 1.0), resolution=1.2)
        anchors = generate_anchors(grid, VEH, "vehicle")
        gt = Box7(2.0, 1.0, 0.0, 1.6, 3.9, 1.56, 0.0)
        targets = match_anchors(anchors, [gt], DEFAULT_MATCHING["vehicle"])
        head = ClassHead(np.random.default_rng(3), in_channels=8)
        fmap = Tensor(rng.normal(size=(8, 8, 8)))
        opt = SGD(head.parameters(), lr=0.01)

        def loss():
            logits, deltas = flatten_head_output(*head(fmap))
            return detection_loss(logits, deltas, targets, LossConfig())

        first = loss().item()
        for _ in range(100):
            opt.zero_grad()
            loss().backward()
            opt.step()
        assert loss().item() <= 0.5 * first


class TestPredict:
    def test_perfect_logits_recover_gt(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        gt = Box7(2.3, -1.1, 0.2, 1.7, 4.0, 1.5, 0.25)
        t = match_anchors(anchors, [gt], DEFAULT_MATCHING["vehicle"])
        logits = Tensor(np.where(t.labels == 1, 9.0, -9.0))
        dets = predict_class(logits, Tensor(t.deltas), anchors, score_thresh=0.2, nms_iou=0.15)
        assert len(dets) == 1
        assert abs(dets[0].box.x - gt.x) <= 1e-9
        assert abs(dets[0].box.y - gt.y) <= 1e-9
        assert dets[0].score > 0.99

    def test_all_background_yields_nothing(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        logits = Tensor(np.full(len(anchors), -9.0))
        deltas = Tensor(np.zeros((len(anchors), 7)))
        assert predict_class(logits, deltas, anchors, 0.2, 0.15) == []

    def test_score_threshold_respected(self):
        anchors = generate_anchors(GRID, VEH, "vehicle")
        logits = Tensor(np.full(len(anchors), -1.5))  # sigmoid ~ 0.18 < 0.2
        deltas = Tensor(np.zeros((len(anchors), 7)))
        assert predict_class(logits, deltas, anchors, 0.2, 0.15) == []
