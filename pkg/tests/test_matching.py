import itertools

import numpy as np
import pytest

from lanegen.errors import BadCost
from lanegen.matching import (
    Assignment,
    focal_neg_cost,
    focal_pos_cost,
    hungarian_match,
    match,
    match_cost,
    object_probabilities,
)

from test_tiling import straight_lane


def brute_force_min_cost(cost):
    """Exhaustive oracle: minimum over all permutations."""
    cost = np.asarray(cost)
    n = cost.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        best = min(best, total)
    return best


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert list(a.slot) == [0, 1]
        assert a.cost == 2.0

    def test_diagonal_identity(self):
        cost = np.full((4, 4), 9.0)
        np.fill_diagonal(cost, 1.0)
        a = hungarian_match(cost)
        assert list(a.slot) == [0, 1, 2, 3]

    def test_rectangular_rejected(self):
        with pytest.raises(BadCost):
            hungarian_match(np.zeros((3, 4)))

    def test_nan_rejected(self):
        cost = np.zeros((3, 3))
        cost[1, 2] = np.nan
        with pytest.raises(BadCost):
            hungarian_match(cost)

    def test_matches_brute_force_on_random_matrices(self):
        rng = np.random.default_rng(123)
        for _ in range(300):
            n = int(rng.integers(2, 8))
            cost = rng.normal(size=(n, n)) * rng.uniform(0.1, 10)
            a = hungarian_match(cost)
            assert a.cost == pytest.approx(brute_force_min_cost(cost), abs=1e-9)
            assert len(set(a.slot)) == n  # a permutation

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        cost = rng.normal(size=(6, 6))
        a = hungarian_match(cost)
        b = hungarian_match(cost)
        assert np.array_equal(a.slot, b.slot)


class TestMatchCost:
    def lanes(self, n, m=20, offset=0.0):
        out = np.zeros((n, m, 6))
        lane = straight_lane(width=3.0, m=m)
        for i in range(n):
            out[i] = lane.stacked() + offset
        return out

    def logits(self, n, obj=0.0):
        z = np.zeros((n, 2))
        z[:, 1] = obj
        return z

    def test_exact_prediction_wins(self):
        gt = [straight_lane(width=3.0)]
        pred = self.lanes(3)
        pred[1] += 5.0  # others displaced
        pred[2] += 9.0
        logits = self.logits(3, obj=0.0)
        logits[0, 1] = 4.0  # confident on the exact one
        a = match(pred, logits, gt)
        assert a.n_real == 1
        assert a.pred_indices.tolist() == [0]
        assert a.gt_indices.tolist() == [0]

    def test_identical_gts_tie_total(self):
        gt = [straight_lane(width=3.0), straight_lane(width=3.0)]
        pred = self.lanes(2)
        cost = match_cost(pred, self.logits(2), gt)
        # either pairing totals the same
        assert cost[0, 0] + cost[1, 1] == pytest.approx(cost[0, 1] + cost[1, 0])

    def test_hand_computed_two_by_two(self):
        # prediction 0 equals GT; prediction 1 shifted +0.5 m in x only.
        gt = [straight_lane(width=3.0)]
        pred = self.lanes(2)
        pred[1, :, 0::2] += 0.5  # x coords of center/left/right
        logits = np.zeros((2, 2))
        cost = match_cost(pred, logits, gt, lambda_point=1.0, lambda_class=1.0)
        p = 0.5  # softmax of equal logits
        pos = -0.25 * (1 - p) ** 2 * np.log(p)
        neg = -0.75 * p**2 * np.log(1 - p)
        # geometric: mean over M x 6 coords; x coords (3 of 6) off by 0.5
        assert cost[0, 0] == pytest.approx(pos, abs=1e-9)
        assert cost[1, 0] == pytest.approx(0.25 + pos, abs=1e-9)
        assert cost[0, 1] == pytest.approx(neg, abs=1e-9)
        assert cost[1, 1] == pytest.approx(neg, abs=1e-9)

    def test_more_gt_than_predictions_rejected(self):
        gt = [straight_lane(), straight_lane(y=5.0)]
        with pytest.raises(BadCost):
            match_cost(self.lanes(1), self.logits(1), gt)

    def test_object_probabilities(self):
        logits = np.array([[0.0, 0.0], [0.0, 100.0], [100.0, 0.0]])
        p = object_probabilities(logits)
        assert p == pytest.approx([0.5, 1.0, 0.0], abs=1e-6)

    def test_focal_costs_monotone(self):
        p = np.linspace(0.01, 0.99, 50)
        assert np.all(np.diff(focal_pos_cost(p)) < 0)  # confident object cheap
        assert np.all(np.diff(focal_neg_cost(p)) > 0)  # confident object pricey as background
