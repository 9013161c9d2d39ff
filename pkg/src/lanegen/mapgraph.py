"""Vectorized road map as a directed graph, path enumeration, and lane
divider synthesis from centerlines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CyclicTileGraph, InvalidWidth, UninterpolatableDivider
from .geom import Polyline, clip_polyline_to_box
from .validation import as_points

DEFAULT_LANE_WIDTH = 3.5


@dataclass(frozen=True)
class Edge:
    from_id: int
    to_id: int
    geometry: Polyline
    lane_width: float | None = None


class MapGraph:
    """Directed graph of centerline nodes and edges with lane widths.

    Edge geometry endpoints must coincide with the node positions (1e-6 m)
    and duplicate (from, to) edges are rejected. Immutable after load.
    """

    def __init__(self, nodes: dict[int, np.ndarray], edges: list[Edge]):
        self.nodes = {int(k): as_points(v, "node")[0] for k, v in nodes.items()}
        seen = set()
        for e in edges:
            if e.from_id not in self.nodes or e.to_id not in self.nodes:
                raise ValueError(f"edge {e.from_id}->{e.to_id} references unknown node")
            if e.from_id == e.to_id:
                raise ValueError(f"self-loop edge at node {e.from_id}")
            key = (e.from_id, e.to_id)
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            if not (
                np.allclose(e.geometry.pts[0], self.nodes[e.from_id], atol=1e-6)
                and np.allclose(e.geometry.pts[-1], self.nodes[e.to_id], atol=1e-6)
            ):
                raise ValueError(
                    f"edge {key} geometry endpoints do not match node positions"
                )
        self.edges = list(edges)

    def bounding_box(self) -> tuple[float, float, float, float]:
        pts = np.concatenate([e.geometry.pts for e in self.edges])
        return (
            float(pts[:, 0].min()),
            float(pts[:, 1].min()),
            float(pts[:, 0].max()),
            float(pts[:, 1].max()),
        )

    def out_edges(self, node_id: int) -> list[Edge]:
        return sorted(
            (e for e in self.edges if e.from_id == node_id), key=lambda e: e.to_id
        )


@dataclass(frozen=True)
class GroundTruthLane:
    """Centerline plus left/right dividers, all with the same point count."""

    centerline: Polyline
    left_divider: Polyline
    right_divider: Polyline

    def __post_init__(self):
        n = len(self.centerline)
        if len(self.left_divider) != n or len(self.right_divider) != n:
            raise ValueError("centerline and dividers must have equal point counts")

    def stacked(self) -> np.ndarray:
        """(M, 6) array with columns [cx, cy, lx, ly, rx, ry]."""
        return np.concatenate(
            [self.centerline.pts, self.left_divider.pts, self.right_divider.pts],
            axis=1,
        )

    def validate_sides(self) -> bool:
        """True when left/right lie on opposite sides of the local tangent
        and both dividers run along the centerline direction."""
        c = self.centerline.pts
        tan = _tangents(c)
        dl = self.left_divider.pts - c
        dr = self.right_divider.pts - c
        cross_l = tan[:, 0] * dl[:, 1] - tan[:, 1] * dl[:, 0]
        cross_r = tan[:, 0] * dr[:, 1] - tan[:, 1] * dr[:, 0]
        if np.any(cross_l * cross_r > 0):
            return False
        for div in (self.left_divider, self.right_divider):
            seg_c = np.diff(c, axis=0)
            seg_d = np.diff(div.pts, axis=0)
            if np.any(np.einsum("ij,ij->i", seg_c, seg_d) <= 0):
                return False
        return True


def _tangents(pts: np.ndarray) -> np.ndarray:
    """Unit tangents: central differences inside, one-sided at the ends."""
    tan = np.empty_like(pts)
    tan[1:-1] = pts[2:] - pts[:-2]
    tan[0] = pts[1] - pts[0]
    tan[-1] = pts[-1] - pts[-2]
    norm = np.linalg.norm(tan, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    return tan / norm


def synthesize_dividers(center: Polyline, width: float) -> GroundTruthLane:
    """Offset the centerline by +-width/2 along the local unit normal.

    The left divider sits on the side of the counter-clockwise normal; by
    construction left + right == 2 * center holds exactly.
    """
    if not width > 0:
        raise InvalidWidth(f"lane width must be > 0, got {width}")
    c = center.pts
    tan = _tangents(c)
    normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    half = 0.5 * width
    return GroundTruthLane(
        centerline=center,
        left_divider=Polyline(c + half * normal),
        right_divider=Polyline(c - half * normal),
    )


def interpolate_divider_gaps(
    lane: GroundTruthLane, gap_mask: np.ndarray
) -> GroundTruthLane:
    """Replace gap-flagged divider points by linear interpolation in
    centerline arclength between the nearest valid neighbours.

    ``gap_mask`` is a (M,) boolean array (True = gap), applied to both
    dividers; the centerline is left untouched.
    """
    mask = np.asarray(gap_mask, dtype=bool)
    if mask.shape != (len(lane.centerline),):
        raise ValueError("gap_mask must have one entry per lane point")
    if mask.all():
        raise UninterpolatableDivider("every divider point is flagged as a gap")
    if mask[0] or mask[-1]:
        raise ValueError("first and last divider points must be valid")
    if not mask.any():
        return lane

    s = lane.centerline.arclengths()
    valid = np.flatnonzero(~mask)

    def fill(div: Polyline) -> Polyline:
        pts = div.pts.copy()
        for axis in range(2):
            pts[mask, axis] = np.interp(s[mask], s[valid], div.pts[valid, axis])
        return Polyline(pts)

    return GroundTruthLane(
        centerline=lane.centerline,
        left_divider=fill(lane.left_divider),
        right_divider=fill(lane.right_divider),
    )


def _check_acyclic(g: MapGraph) -> None:
    indeg = {n: 0 for n in g.nodes}
    for e in g.edges:
        indeg[e.to_id] += 1
    queue = sorted(n for n, d in indeg.items() if d == 0)
    removed = 0
    while queue:
        n = queue.pop()
        removed += 1
        for e in g.out_edges(n):
            indeg[e.to_id] -= 1
            if indeg[e.to_id] == 0:
                queue.append(e.to_id)
    if removed != len(g.nodes):
        raise CyclicTileGraph("road graph contains a cycle inside the tile")


def path_records(g: MapGraph) -> list[tuple[Polyline, float]]:
    """Enumerate maximal paths with their mean lane width.

    One path per (source, sink) pair: sources have in-degree 0, sinks have
    out-degree 0. When several routes connect the same pair, the first one
    in neighbour-id order is kept, which makes enumeration deterministic.
    """
    _check_acyclic(g)
    indeg = {n: 0 for n in g.nodes}
    outdeg = {n: 0 for n in g.nodes}
    for e in g.edges:
        indeg[e.to_id] += 1
        outdeg[e.from_id] += 1
    sources = sorted(n for n in g.nodes if indeg[n] == 0 and outdeg[n] > 0)

    records: list[tuple[Polyline, float]] = []

    def dfs(node: int, edge_stack: list[Edge], found: dict[int, bool]):
        if outdeg[node] == 0:
            if node not in found:
                found[node] = True
                pts = np.concatenate([e.geometry.pts for e in edge_stack])
                widths = [
                    e.lane_width for e in edge_stack if e.lane_width is not None
                ]
                width = float(np.mean(widths)) if widths else DEFAULT_LANE_WIDTH
                records.append((Polyline(pts), width))
            return
        for e in g.out_edges(node):
            edge_stack.append(e)
            dfs(e.to_id, edge_stack, found)
            edge_stack.pop()

    for src in sources:
        dfs(src, [], {})
    return records


def extract_paths(g: MapGraph) -> list[Polyline]:
    """All source-to-sink paths of the graph as concatenated polylines."""
    return [poly for poly, _ in path_records(g)]


def translate_graph(g: MapGraph, offset) -> MapGraph:
    """Shift every node and edge geometry by ``offset``."""
    off = np.asarray(offset, dtype=np.float64).reshape(2)
    nodes = {n: p + off for n, p in g.nodes.items()}
    edges = [
        Edge(e.from_id, e.to_id, Polyline(e.geometry.pts + off), e.lane_width)
        for e in g.edges
    ]
    return MapGraph(nodes, edges)


def clip_graph(g: MapGraph, half_w: float, half_h: float) -> MapGraph:
    """Clip a graph (already in local coordinates) to the tile box.

    Edges are cut at the box boundary; cut positions become new nodes.
    Nodes left without any incident edge are dropped.
    """
    nodes: dict[int, np.ndarray] = {}
    edges: list[Edge] = []
    next_id = max(g.nodes, default=-1) + 1

    def node_for(point: np.ndarray, candidate_id: int) -> int:
        nonlocal next_id
        if candidate_id in g.nodes and np.allclose(
            g.nodes[candidate_id], point, atol=1e-9
        ):
            nodes[candidate_id] = g.nodes[candidate_id]
            return candidate_id
        nid = next_id
        next_id += 1
        nodes[nid] = point
        return nid

    for e in g.edges:
        for run_pts, _ in clip_polyline_to_box(e.geometry.pts, half_w, half_h):
            a = node_for(run_pts[0], e.from_id)
            b = node_for(run_pts[-1], e.to_id)
            if a == b:
                continue
            edges.append(Edge(a, b, Polyline(run_pts), e.lane_width))

    return MapGraph(nodes, edges)
