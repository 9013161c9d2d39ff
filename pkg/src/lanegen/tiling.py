"""Tile grid projection, per-tile aggregation/filtering, and training-time
augmentation.

A tile is a square local region of the world; everything stored on it is
expressed in the tile frame (origin at the tile center). Tiles are the unit
of model input/output. All per-tile operations are pure, so tiles can be
processed in parallel with per-tile seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .base import ParamMixin
from .errors import CyclicTileGraph, EmptyTile
from .geom import Polyline, clip_polyline_to_box, densified_chamfer, project_arclength, resample
from .mapgraph import GroundTruthLane, MapGraph, clip_graph, path_records, synthesize_dividers, translate_graph
from .scene import Scene, Trajectory

MIN_PATH_LEN = 1.0

TAU_ALIGN = 2.0
DELTA_PRUNE = 2.0


@dataclass(frozen=True)
class Tile:
    """Local region with trajectories and ground-truth lanes in tile frame."""

    center: np.ndarray
    height: float
    width: float
    trajectories: list[Trajectory]
    gt_lanes: list[GroundTruthLane]
    split_tag: str = "train"
    tile_id: str = "tile"
    patch_masks: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(2)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)

    @property
    def half_w(self) -> float:
        return self.width / 2.0

    @property
    def half_h(self) -> float:
        return self.height / 2.0


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _local_trajectories(scene: Scene, center: np.ndarray, half_w: float, half_h: float):
    out = []
    for tr in scene.trajectories:
        local = tr.xy - center
        for run_pts, (run_t, run_v) in clip_polyline_to_box(
            local, half_w, half_h, values=[tr.t, tr.v]
        ):
            if np.all(np.diff(run_t) > 0):
                out.append(
                    Trajectory(xy=run_pts, t=run_t, v=np.maximum(run_v, 0.0), source=tr.source)
                )
    return out


def _trim_lane_to_box(
    lane: GroundTruthLane, half_w: float, half_h: float, m_points: int, eps: float = 1.0
) -> GroundTruthLane | None:
    """Longest run of indices where the centerline is inside the box and the
    dividers overhang it by at most ``eps``; None when nothing survives."""
    c = lane.centerline.pts
    inside = (np.abs(c[:, 0]) <= half_w + 1e-9) & (np.abs(c[:, 1]) <= half_h + 1e-9)
    for div in (lane.left_divider.pts, lane.right_divider.pts):
        inside &= (np.abs(div[:, 0]) <= half_w + eps) & (np.abs(div[:, 1]) <= half_h + eps)
    if inside.all():
        return lane
    best_len, best_start, cur_start = 0, -1, None
    for i, flag in enumerate(np.append(inside, False)):
        if flag and cur_start is None:
            cur_start = i
        elif not flag and cur_start is not None:
            if i - cur_start > best_len:
                best_len, best_start = i - cur_start, cur_start
            cur_start = None
    if best_len < 2:
        return None
    sl = slice(best_start, best_start + best_len)
    try:
        return GroundTruthLane(
            centerline=resample(Polyline(c[sl]), m_points),
            left_divider=resample(Polyline(lane.left_divider.pts[sl]), m_points),
            right_divider=resample(Polyline(lane.right_divider.pts[sl]), m_points),
        )
    except ValueError:
        return None


def _local_gt_lanes(scene: Scene, center, half_w, half_h, m_points: int):
    local_graph = clip_graph(
        translate_graph(scene.graph, -center), half_w, half_h
    )
    lanes = []
    for poly, width in path_records(local_graph):
        if poly.length() < MIN_PATH_LEN:
            continue
        lane = synthesize_dividers(resample(poly, m_points), width)
        lane = _trim_lane_to_box(lane, half_w, half_h, m_points)
        if lane is not None:
            lanes.append(lane)
    return lanes


def extract_tile(
    scene: Scene,
    center,
    extent: float,
    m_points: int = 20,
    split_tag: str = "train",
    tile_id: str = "tile",
) -> Tile | None:
    """Build one tile at ``center``; None when it lacks trajectories or GT
    (or the clipped graph has a residual cycle)."""
    center = np.asarray(center, dtype=np.float64)
    half = extent / 2.0
    try:
        gt = _local_gt_lanes(scene, center, half, half, m_points)
    except CyclicTileGraph:
        return None
    if not gt:
        return None
    trajectories = _local_trajectories(scene, center, half, half)
    if not trajectories:
        return None
    return Tile(
        center=center,
        height=extent,
        width=extent,
        trajectories=trajectories,
        gt_lanes=gt,
        split_tag=split_tag,
        tile_id=tile_id,
    )


def grid_spec(scene: Scene, extent: float):
    """(origin, nx, ny): the smallest cell grid, centered on the map's
    bounding box, that covers it. ``origin`` is the grid's lower-left corner."""
    x0, y0, x1, y1 = scene.graph.bounding_box()
    nx = max(1, int(np.ceil((x1 - x0) / extent - 1e-9)))
    ny = max(1, int(np.ceil((y1 - y0) / extent - 1e-9)))
    origin = np.array(
        [(x0 + x1) / 2 - nx * extent / 2, (y0 + y1) / 2 - ny * extent / 2]
    )
    return origin, nx, ny


def point_cell(p, extent: float, origin=(0.0, 0.0)) -> tuple[int, int]:
    """Partition assignment of a point to exactly one grid cell.

    Points exactly on a cell boundary belong to the lower-index cell.
    """
    out = []
    for coord, base in zip(np.asarray(p, dtype=np.float64), origin):
        q = (coord - base) / extent
        idx = int(np.floor(q))
        if q == idx:
            idx -= 1
        out.append(idx)
    return tuple(out)


def grid_tiles(
    scene: Scene, extent: float = 60.0, m_points: int = 20, split_tag: str = "train"
) -> list[Tile]:
    """Non-overlapping tiles covering the map; tiles missing trajectories or
    ground truth are discarded."""
    if not extent > 0:
        raise ValueError("extent must be > 0")
    if not scene.graph.edges:
        return []
    origin, nx, ny = grid_spec(scene, extent)
    tiles = []
    for iy in range(ny):
        for ix in range(nx):
            center = origin + np.array([(ix + 0.5) * extent, (iy + 0.5) * extent])
            tile = extract_tile(
                scene, center, extent, m_points, split_tag, tile_id=f"g{ix}_{iy}"
            )
            if tile is not None:
                tiles.append(tile)
    return tiles


def sample_overlapping_tiles(
    scene: Scene,
    n_extra: int,
    jitter_radius: float,
    seed: int,
    extent: float = 60.0,
    m_points: int = 20,
) -> list[Tile]:
    """Extra train-only tiles jittered around the valid grid tile centers."""
    if n_extra < 0:
        raise ValueError("n_extra must be >= 0")
    if n_extra == 0:
        return []
    base = grid_tiles(scene, extent, m_points, split_tag="train")
    if not base:
        return []
    rng = np.random.default_rng(np.random.PCG64(seed))
    tiles: list[Tile] = []
    attempts = 0
    k = 0
    while len(tiles) < n_extra and attempts < 10 * n_extra:
        attempts += 1
        anchor = base[k % len(base)].center
        k += 1
        angle = rng.uniform(0.0, 2 * np.pi)
        radius = jitter_radius * np.sqrt(rng.uniform())
        center = anchor + radius * np.array([np.cos(angle), np.sin(angle)])
        tile = extract_tile(
            scene, center, extent, m_points, "train", tile_id=f"o{len(tiles)}"
        )
        if tile is not None:
            tiles.append(tile)
    return tiles


# ---------------------------------------------------------------------------
# Spatial consistency filtering
# ---------------------------------------------------------------------------


def _support_index(tr: Trajectory, lanes: list[GroundTruthLane]) -> tuple[int, float]:
    """(index, distance) of the centerline closest to the trajectory."""
    traj_poly = Polyline(tr.xy)
    dists = [densified_chamfer(traj_poly, lane.centerline) for lane in lanes]
    i = int(np.argmin(dists))
    return i, dists[i]


def _clip_tile_content(tile: Tile) -> Tile:
    lanes = []
    for lane in tile.gt_lanes:
        m = len(lane.centerline)
        clipped = _trim_lane_to_box(lane, tile.half_w, tile.half_h, m)
        if clipped is not None:
            lanes.append(clipped)
    trajectories = []
    for tr in tile.trajectories:
        for run_pts, (run_t, run_v) in clip_polyline_to_box(
            tr.xy, tile.half_w, tile.half_h, values=[tr.t, tr.v]
        ):
            if np.all(np.diff(run_t) > 0):
                trajectories.append(
                    Trajectory(xy=run_pts, t=run_t, v=np.maximum(run_v, 0.0), source=tr.source)
                )
    return replace(tile, trajectories=trajectories, gt_lanes=lanes)


def aggregate_and_filter(tile: Tile, tau_align: float = TAU_ALIGN) -> Tile:
    """Drop trajectories that do not align with any GT centerline, and GT
    lanes without any supporting trajectory."""
    tile = _clip_tile_content(tile)
    if not tile.gt_lanes or not tile.trajectories:
        raise EmptyTile(f"tile {tile.tile_id} has no content after clipping")
    kept_traj: list[Trajectory] = []
    support: list[int] = []
    for tr in tile.trajectories:
        idx, dist = _support_index(tr, tile.gt_lanes)
        if dist <= tau_align:
            kept_traj.append(tr)
            support.append(idx)
    supported = sorted(set(support))
    kept_lanes = [tile.gt_lanes[i] for i in supported]
    if not kept_traj or not kept_lanes:
        raise EmptyTile(f"tile {tile.tile_id} empty after alignment filtering")
    return replace(tile, trajectories=kept_traj, gt_lanes=kept_lanes)


def prune_endpoints(tile: Tile, delta_prune: float = DELTA_PRUNE) -> Tile:
    """Trim trajectory points that project more than ``delta_prune`` beyond
    the arclength span of their supporting GT centerline."""
    if not tile.gt_lanes:
        raise EmptyTile(f"tile {tile.tile_id} has no ground truth")
    out = []
    for tr in tile.trajectories:
        idx, _ = _support_index(tr, tile.gt_lanes)
        center = tile.gt_lanes[idx].centerline
        total = center.length()
        s = np.array([project_arclength(center, q) for q in tr.xy])
        ok = (s >= -delta_prune) & (s <= total + delta_prune)
        if not ok.any():
            continue
        first = int(np.argmax(ok))
        last = len(ok) - 1 - int(np.argmax(ok[::-1]))
        if last - first + 1 < 2:
            continue
        sl = slice(first, last + 1)
        out.append(Trajectory(xy=tr.xy[sl], t=tr.t[sl], v=tr.v[sl], source=tr.source))
    if not out:
        raise EmptyTile(f"tile {tile.tile_id} lost every trajectory in pruning")
    return replace(tile, trajectories=out)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    p_each: float = 0.3
    noise_sigma: float = 0.2
    shift_range: float = 3.0
    group_dropout_p: float = 0.5
    tau_align: float = TAU_ALIGN


def _map_tile_geometry(tile: Tile, fn, swap_dividers: bool) -> Tile:
    trajectories = [
        Trajectory(xy=fn(tr.xy), t=tr.t, v=tr.v, source=tr.source)
        for tr in tile.trajectories
    ]
    lanes = []
    for lane in tile.gt_lanes:
        c = Polyline(fn(lane.centerline.pts))
        l = Polyline(fn(lane.left_divider.pts))
        r = Polyline(fn(lane.right_divider.pts))
        if swap_dividers:
            l, r = r, l
        lanes.append(GroundTruthLane(centerline=c, left_divider=l, right_divider=r))
    return replace(tile, trajectories=trajectories, gt_lanes=lanes)


def rotate_tile(tile: Tile, angle: float) -> Tile:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return _map_tile_geometry(tile, lambda pts: pts @ rot.T, swap_dividers=False)


def flip_tile(tile: Tile, axis: str) -> Tile:
    """Mirror the tile: ``axis='x'`` maps (x, y) -> (-x, y), ``'y'`` maps
    (x, y) -> (x, -y). Mirroring flips chirality, so dividers swap sides."""
    sign = np.array([-1.0, 1.0]) if axis == "x" else np.array([1.0, -1.0])
    return _map_tile_geometry(tile, lambda pts: pts * sign, swap_dividers=True)


def shift_tile(tile: Tile, delta) -> Tile:
    off = np.asarray(delta, dtype=np.float64).reshape(2)
    return _map_tile_geometry(tile, lambda pts: pts + off, swap_dividers=False)


def _drop_trajectory_groups(tile: Tile, rng, p_drop: float) -> Tile:
    support = [
        _support_index(tr, tile.gt_lanes)[0] for tr in tile.trajectories
    ]
    lane_ids = sorted(set(support))
    dropped = {i for i in lane_ids if rng.random() < p_drop}
    kept = [
        tr for tr, s in zip(tile.trajectories, support) if s not in dropped
    ]
    return replace(tile, trajectories=kept)


def augment(tile: Tile, seed: int, params: AugmentParams = AugmentParams()) -> Tile:
    """Randomized training-time augmentation; each method fires independently
    with probability ``params.p_each``. Deterministic per seed."""
    if tile.split_tag != "train":
        raise ValueError("augmentation is train-only")
    rng = np.random.default_rng(np.random.PCG64(seed))
    p = params.p_each

    do_rotate = rng.random() < p
    do_hflip = rng.random() < p
    do_vflip = rng.random() < p
    do_dropout = rng.random() < p
    do_noise = rng.random() < p
    do_shift = rng.random() < p
    do_patch = rng.random() < p

    out = tile
    needs_refilter = False
    if do_rotate:
        out = rotate_tile(out, rng.uniform(0.0, 2 * np.pi))
        needs_refilter = True
    if do_hflip:
        out = flip_tile(out, "x")
    if do_vflip:
        out = flip_tile(out, "y")
    if do_dropout:
        out = _drop_trajectory_groups(out, rng, params.group_dropout_p)
        needs_refilter = True
    if do_noise:
        trajectories = [
            Trajectory(
                xy=tr.xy + rng.normal(0.0, params.noise_sigma, size=tr.xy.shape),
                t=tr.t,
                v=tr.v,
                source=tr.source,
            )
            for tr in out.trajectories
        ]
        out = replace(out, trajectories=trajectories)
    if do_shift:
        delta = rng.uniform(-params.shift_range, params.shift_range, size=2)
        out = shift_tile(out, delta)
        needs_refilter = True
    if do_patch:
        n = int(rng.integers(1, 4))
        masks = []
        for _ in range(n):
            w = rng.uniform(0.10, 0.20)
            h = rng.uniform(0.10, 0.20)
            x0 = rng.uniform(0.0, 1.0 - w)
            y0 = rng.uniform(0.0, 1.0 - h)
            masks.append((float(x0), float(y0), float(w), float(h)))
        out = replace(out, patch_masks=tile.patch_masks + tuple(masks))

    if needs_refilter:
        out = aggregate_and_filter(out, tau_align=params.tau_align)
    if not out.trajectories or not out.gt_lanes:
        raise EmptyTile(f"augmentation emptied tile {tile.tile_id}")
    return out


# ---------------------------------------------------------------------------
# Estimator facade and tile file I/O
# ---------------------------------------------------------------------------


class TileExtractor(ParamMixin):
    """Scene -> tiles transformer.

    Projects the tile grid, optionally samples jittered extra train tiles,
    then runs alignment filtering and endpoint pruning on every tile.
    """

    def __init__(
        self,
        extent: float = 60.0,
        m_points: int = 20,
        tau_align: float = TAU_ALIGN,
        delta_prune: float = DELTA_PRUNE,
        n_extra_per_tile: int = 0,
        jitter_radius: float = 15.0,
        split_tag: str = "train",
        seed: int = 0,
    ):
        self.extent = extent
        self.m_points = m_points
        self.tau_align = tau_align
        self.delta_prune = delta_prune
        self.n_extra_per_tile = n_extra_per_tile
        self.jitter_radius = jitter_radius
        self.split_tag = split_tag
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, scene: Scene) -> list[Tile]:
        tiles = grid_tiles(scene, self.extent, self.m_points, self.split_tag)
        if self.split_tag == "train" and self.n_extra_per_tile > 0:
            tiles += sample_overlapping_tiles(
                scene,
                n_extra=self.n_extra_per_tile * len(tiles),
                jitter_radius=self.jitter_radius,
                seed=self.seed,
                extent=self.extent,
                m_points=self.m_points,
            )
        out = []
        for tile in tiles:
            try:
                filtered = aggregate_and_filter(tile, self.tau_align)
                out.append(prune_endpoints(filtered, self.delta_prune))
            except EmptyTile:
                continue
        return out

    def fit_transform(self, scene: Scene, y=None) -> list[Tile]:
        return self.fit(scene, y).transform(scene)


def save_tile(tile: Tile, path) -> None:
    doc = {
        "tile_id": tile.tile_id,
        "center": [float(tile.center[0]), float(tile.center[1])],
        "height": tile.height,
        "width": tile.width,
        "split_tag": tile.split_tag,
        "patch_masks": [list(m) for m in tile.patch_masks],
        "trajectories": [
            {
                "source": tr.source,
                "points": [
                    [float(x), float(y), float(t), float(v)]
                    for (x, y), t, v in zip(tr.xy, tr.t, tr.v)
                ],
            }
            for tr in tile.trajectories
        ],
        "gt_lanes": [
            {
                "centerline": lane.centerline.pts.tolist(),
                "left": lane.left_divider.pts.tolist(),
                "right": lane.right_divider.pts.tolist(),
            }
            for lane in tile.gt_lanes
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_tile(path) -> Tile:
    with open(path) as f:
        doc = json.load(f)
    trajectories = []
    for tr in doc["trajectories"]:
        pts = np.asarray(tr["points"], dtype=np.float64)
        trajectories.append(
            Trajectory(xy=pts[:, :2], t=pts[:, 2], v=pts[:, 3], source=tr["source"])
        )
    lanes = [
        GroundTruthLane(
            centerline=Polyline(l["centerline"]),
            left_divider=Polyline(l["left"]),
            right_divider=Polyline(l["right"]),
        )
        for l in doc["gt_lanes"]
    ]
    return Tile(
        center=np.asarray(doc["center"]),
        height=doc["height"],
        width=doc["width"],
        trajectories=trajectories,
        gt_lanes=lanes,
        split_tag=doc["split_tag"],
        tile_id=doc["tile_id"],
        patch_masks=tuple(tuple(m) for m in doc.get("patch_masks", [])),
    )
