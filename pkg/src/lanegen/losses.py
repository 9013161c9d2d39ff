"""Set-prediction training losses.

Per matched pair: focal classification, pointwise Manhattan distance over
centerline and both dividers, and a direction term penalizing deviation of
consecutive-point direction vectors. One-to-one, one-to-many (replicated
GT), and intermediate-decoder-layer auxiliary losses combine into the
training total; every balancing weight defaults to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadCost
from .mapgraph import GroundTruthLane
from .matching import FOCAL_ALPHA, FOCAL_GAMMA, Assignment, match
from .tensor import Tensor, concat

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_class: float = 1.0
    lambda_point: float = 1.0
    lambda_dir: float = 1.0
    lambda_o2o: float = 1.0
    lambda_o2m: float = 1.0
    lambda_aux: float = 1.0
    focal_alpha: float = FOCAL_ALPHA
    focal_gamma: float = FOCAL_GAMMA
    o2m_repeat: int = 3


@dataclass
class LossReport:
    loss_class: float
    loss_point: float
    loss_dir: float
    loss_o2o: float
    loss_o2m: float
    loss_aux: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def consistent(self, tol: float = 1e-6) -> bool:
        """Total must equal the weighted sum of the three group terms."""
        expected = (
            self.weights.lambda_o2o * self.loss_o2o
            + self.weights.lambda_o2m * self.loss_o2m
            + self.weights.lambda_aux * self.loss_aux
        )
        return abs(expected - self.total) <= tol * max(1.0, abs(expected))


def pred_lane_tensor(centers: Tensor, offsets: Tensor) -> Tensor:
    """(N, M, 6) lane coordinates [c, c+o, c-o] with gradients attached."""
    return concat([centers, centers + offsets, centers - offsets], axis=-1)


def loss_class(
    logits: Tensor,
    assignment: Assignment,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> Tensor:
    """Focal loss over all predictions, normalized by the matched count.

    Matched predictions target the object class, the rest no-object.
    Logits columns are [no_object, object].
    """
    n = logits.shape[0]
    targets = assignment.matched_mask.astype(np.int64)
    logp = logits.log_softmax(axis=-1)
    logp_t = logp[np.arange(n), targets]
    alpha_t = np.where(targets == 1, alpha, 1.0 - alpha)
    per_pred = (logp_t * -1.0) * alpha_t
    if gamma != 0.0:
        per_pred = per_pred * (1.0 - logp_t.exp()) ** gamma
    return per_pred.sum() / max(assignment.n_matched, 1)


def loss_point(pred_lanes: Tensor, gts: list[GroundTruthLane], assignment: Assignment) -> Tensor:
    """Mean over matched instances of the mean-over-points Manhattan
    distance summed across the six lane coordinates."""
    if assignment.n_matched == 0:
        return Tensor(np.zeros((), dtype=pred_lanes.dtype))
    gt_stack = np.stack([lane.stacked() for lane in gts]).astype(pred_lanes.dtype)
    sel = pred_lanes[assignment.pred_indices]  # (K, M, 6)
    target = gt_stack[assignment.gt_indices]
    diff = (sel - target).abs()
    return diff.sum(axis=2).mean(axis=1).mean()


def loss_dir(pred_lanes: Tensor, gts: list[GroundTruthLane], assignment: Assignment) -> Tensor:
    """Mean (1 - cosine similarity) between predicted and GT directions of
    consecutive points, over centerline and both dividers.

    A zero-length predicted segment has undefined direction; it contributes
    the fixed penalty 1 (cosine treated as 0).
    """
    if assignment.n_matched == 0:
        return Tensor(np.zeros((), dtype=pred_lanes.dtype))
    k = assignment.n_matched
    m = pred_lanes.shape[1]
    gt_stack = np.stack([lane.stacked() for lane in gts]).astype(pred_lanes.dtype)
    target = gt_stack[assignment.gt_indices].reshape(k, m, 3, 2)
    gt_dirs = target[:, 1:] - target[:, :-1]  # (K, M-1, 3, 2)
    gt_norm = np.sqrt((gt_dirs**2).sum(axis=-1) + _NORM_EPS)

    sel = pred_lanes[assignment.pred_indices].reshape(k, m, 3, 2)
    pred_dirs = sel[:, 1:] - sel[:, :-1]
    pred_norm = ((pred_dirs**2).sum(axis=-1) + _NORM_EPS).sqrt()
    dot = (pred_dirs * gt_dirs).sum(axis=-1)
    cos = dot / (pred_norm * gt_norm)
    return (1.0 - cos).mean()


@dataclass
class GroupLoss:
    total: Tensor
    loss_class: float
    loss_point: float
    loss_dir: float


def group_loss(
    centers: Tensor,
    offsets: Tensor,
    logits: Tensor,
    gts: list[GroundTruthLane],
    weights: LossWeights,
) -> GroupLoss:
    """Matched one-to-one loss of a single query group against ``gts``."""
    lanes = pred_lane_tensor(centers, offsets)
    assignment = match(
        lanes.data,
        logits.data,
        gts,
        lambda_point=weights.lambda_point,
        lambda_class=weights.lambda_class,
        alpha=weights.focal_alpha,
        gamma=weights.focal_gamma,
    )
    lc = loss_class(logits, assignment, weights.focal_alpha, weights.focal_gamma)
    lp = loss_point(lanes, gts, assignment)
    ld = loss_dir(lanes, gts, assignment)
    total = weights.lambda_class * lc + weights.lambda_point * lp + weights.lambda_dir * ld
    return GroupLoss(total=total, loss_class=lc.item(), loss_point=lp.item(), loss_dir=ld.item())


def replicate_gts(gts: list[GroundTruthLane], k: int, capacity: int) -> list[GroundTruthLane]:
    """GT list repeated ``k`` times for one-to-many matching, truncated to the
    query-group capacity (at least one full copy must fit)."""
    if len(gts) > capacity:
        raise BadCost(
            f"{len(gts)} GT instances exceed the one-to-many capacity {capacity}"
        )
    out = (gts * k)[:capacity]
    return out


def loss_total(
    outputs: list[dict],
    gts: list[GroundTruthLane],
    n_o2o: int,
    weights: LossWeights = LossWeights(),
    sample: int = 0,
) -> tuple[Tensor, LossReport]:
    """Full training loss for one tile from the per-layer head outputs.

    One-to-one on the final layer's first ``n_o2o`` queries; one-to-many on
    the remaining queries against GT replicated ``o2m_repeat`` times;
    auxiliary one-to-one losses on every intermediate layer.
    """
    final = outputs[-1]
    b = sample

    def slices(layer, lo, hi):
        return (
            layer["centers"][b, lo:hi],
            layer["offsets"][b, lo:hi],
            layer["logits"][b, lo:hi],
        )

    o2o = group_loss(*slices(final, 0, n_o2o), gts, weights)

    n_total = final["centers"].shape[1]
    if n_total > n_o2o and weights.lambda_o2m != 0.0:
        gts_rep = replicate_gts(gts, weights.o2m_repeat, n_total - n_o2o)
        o2m = group_loss(*slices(final, n_o2o, n_total), gts_rep, weights)
        o2m_total, o2m_val = o2m.total, o2m.total.item()
    else:
        o2m_total, o2m_val = Tensor(np.zeros((), dtype=np.float32)), 0.0

    aux_total = Tensor(np.zeros((), dtype=np.float32))
    aux_val = 0.0
    for layer in outputs[:-1]:
        g = group_loss(*slices(layer, 0, n_o2o), gts, weights)
        aux_total = aux_total + g.total
        aux_val += g.total.item()

    total = (
        weights.lambda_o2o * o2o.total
        + weights.lambda_o2m * o2m_total
        + weights.lambda_aux * aux_total
    )
    report = LossReport(
        loss_class=o2o.loss_class,
        loss_point=o2o.loss_point,
        loss_dir=o2o.loss_dir,
        loss_o2o=o2o.total.item(),
        loss_o2m=o2m_val,
        loss_aux=aux_val,
        total=total.item(),
        weights=weights,
    )
    return total, report
