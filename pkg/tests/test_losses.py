import numpy as np
import pytest

from lanegen.losses import (
    GroupLoss,
    LossReport,
    LossWeights,
    group_loss,
    loss_class,
    loss_dir,
    loss_point,
    loss_total,
    pred_lane_tensor,
    replicate_gts,
)
from lanegen.matching import Assignment, match
from lanegen.tensor import Tensor, grad_check

from test_tiling import straight_lane


def make_assignment(slot, n_real):
    return Assignment(slot=np.asarray(slot), n_real=n_real, cost=0.0)


def lanes_tensor_from_gt(gts, jitter=0.0, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    stack = np.stack([g.stacked() for g in gts]).astype(dtype)
    if jitter:
        stack = stack + rng.normal(0, jitter, stack.shape)
    centers = Tensor(stack[:, :, :2].copy())
    offsets = Tensor((stack[:, :, 2:4] - stack[:, :, :2]).copy())
    return centers, offsets


class TestLossClass:
    def test_perfect_predictions_near_zero(self):
        logits = np.zeros((4, 2))
        logits[0, 1] = 40.0  # matched, extremely confident object
        logits[1:, 0] = 40.0  # unmatched, extremely confident background
        a = make_assignment([0, 1, 2, 3], n_real=1)
        val = loss_class(Tensor(logits), a).item()
        assert val < 1e-6

    def test_uniform_logits_closed_form(self):
        # p = 0.5 everywhere; 1 matched of 50
        n = 50
        logits = Tensor(np.zeros((n, 2)))
        a = make_assignment(list(range(n)), n_real=1)
        val = loss_class(logits, a).item()
        ln2 = np.log(2.0)
        expected = 0.25 * 0.25 * ln2 + 49 * 0.75 * 0.25 * ln2
        assert val == pytest.approx(expected, rel=1e-6)

    def test_gamma_zero_alpha_half_is_half_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits_np = rng.normal(size=(6, 2))
        a = make_assignment([0, 1, 2, 3, 4, 5], n_real=2)
        val = loss_class(Tensor(logits_np), a, alpha=0.5, gamma=0.0).item()
        z = logits_np - logits_np.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        targets = np.array([1, 1, 0, 0, 0, 0])
        ce = -np.log(p[np.arange(6), targets]).sum() / 2
        assert val == pytest.approx(0.5 * ce, rel=1e-6)


class TestLossPoint:
    def test_exact_is_zero(self):
        gts = [straight_lane(width=3.0)]
        centers, offsets = lanes_tensor_from_gt(gts)
        lanes = pred_lane_tensor(centers, offsets)
        a = make_assignment([0], n_real=1)
        assert loss_point(lanes, gts, a).item() == 0.0

    def test_constant_offset_gives_three(self):
        # every coordinate off by +0.5 -> 6 coords x 0.5 = 3.0
        gts = [straight_lane(width=3.0)]
        centers, offsets = lanes_tensor_from_gt(gts)
        centers = centers + 0.5  # shifts center, left and right together
        lanes = pred_lane_tensor(centers, offsets)
        a = make_assignment([0], n_real=1)
        assert loss_point(lanes, gts, a).item() == pytest.approx(3.0, abs=1e-9)

    def test_unmatched_predictions_ignored(self):
        gts = [straight_lane(width=3.0)]
        centers, offsets = lanes_tensor_from_gt(gts + gts)  # 2 identical preds
        base = loss_point(pred_lane_tensor(centers, offsets), gts,
                          make_assignment([0, 1], n_real=1)).item()
        wild = centers.data.copy()
        wild[1] += 1e6  # perturb only the unmatched prediction
        lanes = pred_lane_tensor(Tensor(wild), offsets)
        val = loss_point(lanes, gts, make_assignment([0, 1], n_real=1)).item()
        assert val == base == 0.0


class TestLossDir:
    def test_exact_is_zero(self):
        gts = [straight_lane(width=3.0)]
        centers, offsets = lanes_tensor_from_gt(gts)
        lanes = pred_lane_tensor(centers, offsets)
        a = make_assignment([0], n_real=1)
        assert loss_dir(lanes, gts, a).item() == pytest.approx(0.0, abs=1e-6)

    def test_reversed_prediction_costs_two_per_segment(self):
        gts = [straight_lane(width=3.0)]
        rev = gts[0].stacked()[::-1][None].copy()  # (1, M, 6)
        centers = Tensor(rev[:, :, :2].copy())
        offsets = Tensor((rev[:, :, 2:4] - rev[:, :, :2]).copy())
        lanes = pred_lane_tensor(centers, offsets)
        a = make_assignment([0], n_real=1)
        assert loss_dir(lanes, gts, a).item() == pytest.approx(2.0, abs=1e-6)

    def test_orthogonal_costs_one(self):
        # GT runs +x; prediction runs +y
        gts = [straight_lane(width=3.0)]
        m = len(gts[0].centerline)
        ys = np.linspace(-30, 30, m)
        pred = np.zeros((1, m, 6))
        pred[0, :, 1] = ys  # center
        pred[0, :, 2] = -1.5  # left x
        pred[0, :, 3] = ys
        pred[0, :, 4] = 1.5
        pred[0, :, 5] = ys
        centers = Tensor(pred[:, :, :2].copy())
        offsets = Tensor((pred[:, :, 2:4] - pred[:, :, :2]).copy())
        lanes = pred_lane_tensor(centers, offsets)
        a = make_assignment([0], n_real=1)
        assert loss_dir(lanes, gts, a).item() == pytest.approx(1.0, abs=1e-6)

    def test_zero_length_segment_penalty_one(self):
        gts = [straight_lane(width=3.0, m=4)]
        collapsed = np.zeros((1, 4, 6))  # all points identical -> every segment zero
        centers = Tensor(collapsed[:, :, :2].copy())
        offsets = Tensor(np.zeros((1, 4, 2)))
        lanes = pred_lane_tensor(centers, offsets)
        a = make_assignment([0], n_real=1)
        assert loss_dir(lanes, gts, a).item() == pytest.approx(1.0, abs=1e-6)


class TestLossTotal:
    def outputs_for(self, gts, n_o2o, n_o2m, layers=2, jitter=1.0, seed=3):
        rng = np.random.default_rng(seed)
        m = len(gts[0].centerline)
        outs = []
        for _ in range(layers):
            n = n_o2o + n_o2m
            centers = rng.normal(0, 10, size=(1, n, m, 2))
            offsets = rng.normal(0, 1, size=(1, n, m, 2))
            logits = rng.normal(size=(1, n, 2))
            outs.append(
                {
                    "centers": Tensor(centers),
                    "offsets": Tensor(offsets),
                    "logits": Tensor(logits),
                }
            )
        return outs

    def test_report_identity(self):
        gts = [straight_lane(width=3.0), straight_lane(y=8.0, width=3.0)]
        outs = self.outputs_for(gts, n_o2o=5, n_o2m=8)
        total, report = loss_total(outs, gts, n_o2o=5)
        assert report.consistent(tol=1e-6)
        assert total.item() == pytest.approx(report.total)

    def test_zero_losses_zero_total(self):
        gts = [straight_lane(width=3.0)]
        stack = gts[0].stacked()[None]  # (1, M, 6)
        m = stack.shape[1]

        def perfect_layer(n):
            centers = np.tile(stack[:, None, :, :2], (1, n, 1, 1))
            offs = np.tile(stack[:, None, :, 2:4] - stack[:, None, :, :2], (1, n, 1, 1))
            logits = np.zeros((1, n, 2))
            logits[0, :, 1] = 40.0  # all confidently object
            return centers, offs, logits

        # one prediction slot, GT count 1: everything matches exactly
        c, o, l = perfect_layer(1)
        outs = [
            {"centers": Tensor(c), "offsets": Tensor(o), "logits": Tensor(l)}
        ]
        total, report = loss_total(outs, gts, n_o2o=1, weights=LossWeights(o2m_repeat=1))
        assert total.item() < 1e-6
        assert report.loss_point == 0.0

    def test_o2m_with_k1_equals_o2o(self):
        gts = [straight_lane(width=3.0), straight_lane(y=8.0, width=3.0)]
        rng = np.random.default_rng(5)
        n, m = 6, len(gts[0].centerline)
        centers = Tensor(rng.normal(0, 10, size=(n, m, 2)))
        offsets = Tensor(rng.normal(0, 1, size=(n, m, 2)))
        logits = Tensor(rng.normal(size=(n, 2)))
        w = LossWeights()
        o2o = group_loss(centers, offsets, logits, gts, w)
        gts_rep = replicate_gts(gts, k=1, capacity=n)
        o2m = group_loss(centers, offsets, logits, gts_rep, w)
        assert o2m.total.item() == pytest.approx(o2o.total.item(), abs=1e-6)

    def test_doubling_lambda_o2m_doubles_contribution(self):
        gts = [straight_lane(width=3.0)]
        outs = self.outputs_for(gts, n_o2o=4, n_o2m=6)
        _, r1 = loss_total(outs, gts, n_o2o=4, weights=LossWeights(lambda_o2m=1.0))
        outs2 = self.outputs_for(gts, n_o2o=4, n_o2m=6)
        _, r2 = loss_total(outs2, gts, n_o2o=4, weights=LossWeights(lambda_o2m=2.0))
        base = r1.total - r1.loss_o2m
        assert r2.total == pytest.approx(base + 2.0 * r1.loss_o2m, rel=1e-6)

    def test_prediction_permutation_invariance(self):
        gts = [straight_lane(width=3.0), straight_lane(y=8.0, width=3.0)]
        rng = np.random.default_rng(6)
        n, m = 5, len(gts[0].centerline)
        centers = rng.normal(0, 10, size=(n, m, 2))
        offsets = rng.normal(0, 1, size=(n, m, 2))
        logits = rng.normal(size=(n, 2))
        w = LossWeights()
        a = group_loss(Tensor(centers), Tensor(offsets), Tensor(logits), gts, w)
        perm = rng.permutation(n)
        b = group_loss(
            Tensor(centers[perm]), Tensor(offsets[perm]), Tensor(logits[perm]), gts, w
        )
        assert a.loss_point == pytest.approx(b.loss_point, abs=1e-9)
        assert a.loss_dir == pytest.approx(b.loss_dir, abs=1e-9)
        assert a.loss_class == pytest.approx(b.loss_class, abs=1e-9)

    def test_global_translation_invariance(self):
        gts = [straight_lane(width=3.0)]
        rng = np.random.default_rng(7)
        n, m = 3, len(gts[0].centerline)
        centers = rng.normal(0, 10, size=(n, m, 2))
        offsets = rng.normal(0, 1, size=(n, m, 2))
        logits = rng.normal(size=(n, 2))
        w = LossWeights()
        a = group_loss(Tensor(centers), Tensor(offsets), Tensor(logits), gts, w)

        shift = np.array([12.3, -4.5])
        from lanegen.geom import Polyline
        from lanegen.mapgraph import GroundTruthLane

        gts_shifted = [
            GroundTruthLane(
                centerline=Polyline(g.centerline.pts + shift),
                left_divider=Polyline(g.left_divider.pts + shift),
                right_divider=Polyline(g.right_divider.pts + shift),
            )
            for g in gts
        ]
        b = group_loss(
            Tensor(centers + shift), Tensor(offsets), Tensor(logits), gts_shifted, w
        )
        assert a.loss_point == pytest.approx(b.loss_point, abs=1e-9)
        assert a.loss_dir == pytest.approx(b.loss_dir, abs=1e-9)


class TestLossGradients:
    def test_group_loss_gradcheck(self):
        # two-lane fixture, full matched loss through matching + all terms
        gts = [straight_lane(width=3.0, m=4), straight_lane(y=8.0, width=3.0, m=4)]
        rng = np.random.default_rng(8)
        n, m = 3, 4
        centers0 = rng.normal(0, 5, size=(n, m, 2))
        offsets0 = rng.normal(0, 0.5, size=(n, m, 2))
        logits0 = rng.normal(size=(n, 2))
        w = LossWeights()

        def fn(c, o, l):
            return group_loss(c, o, l, gts, w).total

        err = grad_check(fn, [centers0, offsets0, logits0])
        assert err < 1e-3
