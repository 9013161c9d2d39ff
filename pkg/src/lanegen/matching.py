"""Bipartite assignment between predicted lanes and ground truth.

Predictions are matched one-to-one against the GT set padded with no-object
slots; the matching cost combines the mean Manhattan distance over all lane
coordinates with a focal classification cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import BadCost
from .mapgraph import GroundTruthLane

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0

_EPS = 1e-7


@dataclass(frozen=True)
class Assignment:
    """Result of one Hungarian solve on an N x N padded cost matrix.

    ``slot[i]`` is the column assigned to prediction ``i``; columns below
    ``n_real`` are genuine GT instances, the rest are no-object padding.
    """

    slot: np.ndarray
    n_real: int
    cost: float

    @property
    def matched_mask(self) -> np.ndarray:
        return self.slot < self.n_real

    @property
    def pred_indices(self) -> np.ndarray:
        return np.flatnonzero(self.matched_mask)

    @property
    def gt_indices(self) -> np.ndarray:
        return self.slot[self.matched_mask]

    @property
    def n_matched(self) -> int:
        return int(self.matched_mask.sum())


def hungarian_match(cost: np.ndarray, n_real: int | None = None) -> Assignment:
    """Optimal assignment minimizing the total cost of a square matrix.

    Delegates the linear sum assignment to scipy (Jonker-Volgenant); rows are
    predictions, columns are GT slots. Deterministic for a fixed matrix.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise BadCost(f"cost matrix must be square, got {cost.shape}")
    if np.isnan(cost).any():
        raise BadCost("cost matrix contains NaN")
    if np.isinf(cost).any():
        raise BadCost("cost matrix contains Inf")
    rows, cols = linear_sum_assignment(cost)
    slot = np.empty(cost.shape[0], dtype=np.int64)
    slot[rows] = cols
    if n_real is None:
        n_real = cost.shape[0]
    return Assignment(slot=slot, n_real=n_real, cost=float(cost[rows, cols].sum()))


def object_probabilities(class_logits: np.ndarray) -> np.ndarray:
    """Softmax object probability; logits columns are [no_object, object]."""
    z = class_logits - class_logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def focal_pos_cost(p_obj: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Focal penalty for calling this prediction an object."""
    p = np.clip(p_obj, _EPS, 1.0 - _EPS)
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def focal_neg_cost(p_obj: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Focal penalty for calling this prediction background."""
    p = np.clip(p_obj, _EPS, 1.0 - _EPS)
    return -(1.0 - alpha) * p**gamma * np.log(1.0 - p)


def match_cost(
    pred_lanes: np.ndarray,
    class_logits: np.ndarray,
    gts: list[GroundTruthLane],
    lambda_point: float = 1.0,
    lambda_class: float = 1.0,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> np.ndarray:
    """N x N cost matrix: real GT columns first, no-object padding after.

    ``pred_lanes`` is (N, M, 6) with [cx, cy, lx, ly, rx, ry] columns; the
    geometric term is the Manhattan distance averaged over all M x 6
    coordinates. No-object columns carry only the classification cost.
    """
    n = pred_lanes.shape[0]
    g = len(gts)
    if g > n:
        raise BadCost(f"{g} GT instances exceed {n} prediction slots")
    p_obj = object_probabilities(class_logits)
    cost = np.empty((n, n), dtype=np.float64)
    neg = focal_neg_cost(p_obj, alpha, gamma)
    cost[:, g:] = lambda_class * neg[:, None]
    if g:
        gt_stack = np.stack([lane.stacked() for lane in gts])  # (G, M, 6)
        diff = np.abs(pred_lanes[:, None, :, :] - gt_stack[None, :, :, :])
        l1 = diff.mean(axis=(2, 3))  # (N, G)
        pos = focal_pos_cost(p_obj, alpha, gamma)
        cost[:, :g] = lambda_point * l1 + lambda_class * pos[:, None]
    return cost


def match(
    pred_lanes: np.ndarray,
    class_logits: np.ndarray,
    gts: list[GroundTruthLane],
    lambda_point: float = 1.0,
    lambda_class: float = 1.0,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> Assignment:
    cost = match_cost(pred_lanes, class_logits, gts, lambda_point, lambda_class, alpha, gamma)
    return hungarian_match(cost, n_real=len(gts))
