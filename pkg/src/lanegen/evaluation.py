"""Chamfer-distance average precision, reported separately for centerlines
(AP_c) and lane dividers (AP_ld).

Protocol: per threshold, predictions are matched to ground truth greedily in
descending confidence order (a prediction takes the closest unmatched GT if
within the threshold); AP is the area under the all-point interpolated
precision/recall curve. Records from many tiles are pooled before the curve
is computed (dataset-level AP, not a mean of per-tile APs).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NoInstances
from .geom import chamfer_distance
from .mapgraph import GroundTruthLane
from .model import LanePrediction
from .tiling import Tile

DEFAULT_THRESHOLDS = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class EvalRecord:
    """One predicted instance: confidence plus per-threshold TP flags and the
    matched GT id (or -1). The key orders records deterministically."""

    confidence: float
    tp: tuple[bool, ...]
    matched_gt: tuple[int, ...]
    key: tuple[int, int]


@dataclass(frozen=True)
class APResult:
    ap_c: float
    ap_ld: float
    per_threshold_c: dict[float, float]
    per_threshold_ld: dict[float, float]

    @property
    def ap(self) -> float:
        return 0.5 * (self.ap_c + self.ap_ld)

    def summary(self) -> dict[str, float]:
        out = {"ap": self.ap, "ap_c": self.ap_c, "ap_ld": self.ap_ld}
        for tau, v in sorted(self.per_threshold_c.items()):
            out[f"ap_c_tau_{tau:g}"] = v
        for tau, v in sorted(self.per_threshold_ld.items()):
            out[f"ap_ld_tau_{tau:g}"] = v
        return out


def greedy_match_records(
    pred_instances: list[np.ndarray],
    confidences: np.ndarray,
    gt_instances: list[np.ndarray],
    thresholds,
    tile_index: int = 0,
) -> list[EvalRecord]:
    """Confidence-ordered greedy matching of polyline instances.

    Each prediction claims the closest unmatched GT if the Chamfer distance
    is within the threshold; one GT may be claimed at most once per
    threshold.
    """
    order = sorted(range(len(pred_instances)), key=lambda i: (-confidences[i], i))
    if gt_instances:
        dist = np.array(
            [
                [chamfer_distance(p, g) for g in gt_instances]
                for p in pred_instances
            ]
        )
    records = []
    taken = {tau: np.zeros(len(gt_instances), dtype=bool) for tau in thresholds}
    for rank, i in enumerate(order):
        tp_flags, matched = [], []
        for tau in thresholds:
            hit = -1
            if gt_instances:
                cand = np.where(~taken[tau])[0]
                if cand.size:
                    j = cand[np.argmin(dist[i, cand])]
                    if dist[i, j] <= tau:
                        taken[tau][j] = True
                        hit = int(j)
            tp_flags.append(hit >= 0)
            matched.append(hit)
        records.append(
            EvalRecord(
                confidence=float(confidences[i]),
                tp=tuple(tp_flags),
                matched_gt=tuple(matched),
                key=(tile_index, i),
            )
        )
    return records


def average_precision(records: list[EvalRecord], n_gt: int, tau_index: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if n_gt == 0:
        return 0.0
    ordered = sorted(records, key=lambda r: (-r.confidence, r.key))
    tp = np.array([r.tp[tau_index] for r in ordered], dtype=np.float64)
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope (max precision at any recall >= r)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


@dataclass
class EvalAccumulator:
    """Pools centerline and divider records across tiles."""

    thresholds: tuple = DEFAULT_THRESHOLDS
    records_c: list[EvalRecord] = field(default_factory=list)
    records_ld: list[EvalRecord] = field(default_factory=list)
    n_gt_c: int = 0
    n_gt_ld: int = 0
    _tiles: int = 0

    def add_tile(self, pred: LanePrediction, gts: list[GroundTruthLane]):
        idx = self._tiles
        self._tiles += 1
        scores = pred.scores
        centers = [pred.centerlines[i] for i in range(len(scores))]
        gt_centers = [g.centerline.pts for g in gts]
        self.records_c += greedy_match_records(
            centers, scores, gt_centers, self.thresholds, tile_index=idx
        )
        self.n_gt_c += len(gts)

        div_instances = []
        div_conf = []
        for i in range(len(scores)):
            div_instances += [pred.left[i], pred.right[i]]
            div_conf += [scores[i], scores[i]]
        gt_divs = []
        for g in gts:
            gt_divs += [g.left_divider.pts, g.right_divider.pts]
        self.records_ld += greedy_match_records(
            div_instances, np.array(div_conf), gt_divs, self.thresholds, tile_index=idx
        )
        self.n_gt_ld += 2 * len(gts)

    def result(self) -> APResult:
        if self.n_gt_c == 0 and not self.records_c:
            raise NoInstances("nothing to evaluate: no predictions and no GT")
        if self.n_gt_c == 0:
            warnings.warn("evaluating against empty ground truth: AP is 0")
        per_c, per_ld = {}, {}
        for k, tau in enumerate(self.thresholds):
            per_c[tau] = average_precision(self.records_c, self.n_gt_c, k)
            per_ld[tau] = average_precision(self.records_ld, self.n_gt_ld, k)
        ap_c = float(np.mean(list(per_c.values()))) if per_c else 0.0
        ap_ld = float(np.mean(list(per_ld.values()))) if per_ld else 0.0
        return APResult(
            ap_c=ap_c, ap_ld=ap_ld, per_threshold_c=per_c, per_threshold_ld=per_ld
        )


def evaluate(
    preds: list[tuple[LanePrediction, None]] | LanePrediction,
    gts: list[GroundTruthLane],
    thresholds=DEFAULT_THRESHOLDS,
) -> APResult:
    """Score one prediction set against one GT set."""
    acc = EvalAccumulator(thresholds=tuple(thresholds))
    acc.add_tile(preds, gts)
    return acc.result()


def evaluate_tiles(
    model,
    tiles: list[Tile],
    raster_size: int,
    v_max: float = 30.0,
    thresholds=DEFAULT_THRESHOLDS,
    intensity_scale: float = 1000.0,
) -> tuple[APResult, list[dict]]:
    """Dataset-level AP over tiles plus a per-tile breakdown."""
    from .raster import rasterize

    acc = EvalAccumulator(thresholds=tuple(thresholds))
    breakdown = []
    for tile in tiles:
        raster = rasterize(
            tile, raster_size, raster_size, v_max=v_max, intensity_scale=intensity_scale
        )
        pred = model.predict(raster)
        acc.add_tile(pred, tile.gt_lanes)
        solo = EvalAccumulator(thresholds=tuple(thresholds))
        solo.add_tile(pred, tile.gt_lanes)
        r = solo.result()
        breakdown.append(
            {
                "tile_id": tile.tile_id,
                "n_gt": len(tile.gt_lanes),
                "n_pred": len(pred.scores),
                "ap": r.ap,
                "ap_c": r.ap_c,
                "ap_ld": r.ap_ld,
            }
        )
    return acc.result(), breakdown


def write_results(path, result: APResult, extra: dict | None = None) -> None:
    with open(path, "w") as f:
        for key, val in (extra or {}).items():
            f.write(f"{key}={val}\n")
        for key, val in result.summary().items():
            f.write(f"{key}={val:.6f}\n")


def write_breakdown(path, breakdown: list[dict]) -> None:
    with open(path, "w") as f:
        f.write("tile_id\tn_gt\tn_pred\tap\tap_c\tap_ld\n")
        for row in breakdown:
            f.write(
                f"{row['tile_id']}\t{row['n_gt']}\t{row['n_pred']}\t"
                f"{row['ap']:.6f}\t{row['ap_c']:.6f}\t{row['ap_ld']:.6f}\n"
            )


# ---------------------------------------------------------------------------
# SVG rendering of predictions vs ground truth
# ---------------------------------------------------------------------------


def _svg_path(pts: np.ndarray, scale: float, half: float) -> str:
    coords = [(scale * (x + half), scale * (half - y)) for x, y in pts]
    d = "M " + " L ".join(f"{x:.2f} {y:.2f}" for x, y in coords)
    return d


def _arrow(pts: np.ndarray, scale: float, half: float) -> str:
    """Small direction arrow at the polyline midpoint."""
    mid = len(pts) // 2
    a, b = pts[max(0, mid - 1)], pts[min(len(pts) - 1, mid + 1)]
    d = b - a
    n = np.hypot(*d)
    if n == 0:
        return ""
    d = d / n
    tip = (a + b) / 2 + d * 1.2
    left = tip - 1.2 * d + 0.6 * np.array([-d[1], d[0]])
    right = tip - 1.2 * d - 0.6 * np.array([-d[1], d[0]])
    p = [tip, left, right]
    pts_str = " ".join(
        f"{scale * (x + half):.2f},{scale * (half - y):.2f}" for x, y in p
    )
    return f'<polygon points="{pts_str}" fill="currentColor"/>'


def render_tile_svg(
    path,
    tile: Tile,
    pred: LanePrediction | None = None,
    score_threshold: float = 0.5,
    size_px: int = 480,
) -> None:
    """Ground truth (dashed) and confident predictions: centerlines green,
    dividers orange, direction arrows at midpoints."""
    half = max(tile.half_w, tile.half_h)
    scale = size_px / (2 * half)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_px}" height="{size_px}" '
        f'viewBox="0 0 {size_px} {size_px}">',
        f'<rect width="{size_px}" height="{size_px}" fill="#101010"/>',
    ]
    for tr in tile.trajectories:
        lines.append(
            f'<path d="{_svg_path(tr.xy, scale, half)}" stroke="#3a3a55" '
            'fill="none" stroke-width="1"/>'
        )
    for lane in tile.gt_lanes:
        for poly, color in (
            (lane.centerline, "#00aa44"),
            (lane.left_divider, "#cc7722"),
            (lane.right_divider, "#cc7722"),
        ):
            lines.append(
                f'<path d="{_svg_path(poly.pts, scale, half)}" stroke="{color}" '
                'fill="none" stroke-width="1" stroke-dasharray="4 3" opacity="0.8"/>'
            )
    if pred is not None:
        keep = pred.scores >= score_threshold
        for i in np.flatnonzero(keep):
            for pts, color in (
                (pred.centerlines[i], "#00ff66"),
                (pred.left[i], "#ffaa33"),
                (pred.right[i], "#ffaa33"),
            ):
                lines.append(
                    f'<g color="{color}"><path d="{_svg_path(pts, scale, half)}" '
                    f'stroke="{color}" fill="none" stroke-width="1.6"/>'
                    f"{_arrow(pts, scale, half)}</g>"
                )
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines))
