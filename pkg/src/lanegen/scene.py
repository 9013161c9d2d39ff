"""Synthetic world generation and scene file I/O.

A Scene bundles a vectorized road map with a set of vehicle trajectories.
Worlds are generated deterministically from a seed; the same `.lgs` JSON
format handles export and import so externally prepared scenes can be fed
into the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedScene, UnknownLayout
from .geom import Polyline
from .mapgraph import Edge, MapGraph, path_records

FORMAT_VERSION = 1

TRAJECTORY_RATE_HZ = 2.0

# Per-tile density targets patterned after typical fleet datasets:
# sparse internal-style capture, a mid-density public set and a very dense one.
DENSITY_PRESETS = {
    "internal": {"density": 5, "noise_sigma": 0.3},
    "nuscenes": {"density": 6, "noise_sigma": 0.35},
    "nuplan": {"density": 250, "noise_sigma": 0.4},
}

LAYOUTS = ("straight", "curve", "merge", "intersection", "grid")


@dataclass(frozen=True)
class Trajectory:
    """Timestamped 2-D track with per-point speed, from the ego vehicle or a
    tracked one."""

    xy: np.ndarray
    t: np.ndarray
    v: np.ndarray
    source: str

    def __post_init__(self):
        xy = np.ascontiguousarray(np.asarray(self.xy, dtype=np.float64))
        t = np.asarray(self.t, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) < 2:
            raise ValueError("trajectory needs a (K>=2, 2) point array")
        if t.shape != (len(xy),) or v.shape != (len(xy),):
            raise ValueError("timestamps and speeds must match point count")
        if not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(v < 0):
            raise ValueError("speeds must be >= 0")
        if self.source not in ("ego", "tracked"):
            raise ValueError(f"unknown trajectory source {self.source!r}")
        for a in (xy, t, v):
            a.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)

    def __len__(self) -> int:
        return len(self.xy)


@dataclass
class Scene:
    graph: MapGraph
    trajectories: list[Trajectory]
    rng_seed: int = 0

    def __post_init__(self):
        if self.graph.edges:
            x0, y0, x1, y1 = self.graph.bounding_box()
            for i, tr in enumerate(self.trajectories):
                if (
                    tr.xy[:, 0].min() < x0 - 50.0
                    or tr.xy[:, 0].max() > x1 + 50.0
                    or tr.xy[:, 1].min() < y0 - 50.0
                    or tr.xy[:, 1].max() > y1 + 50.0
                ):
                    raise ValueError(
                        f"trajectory {i} strays more than 50 m outside the map"
                    )


# ---------------------------------------------------------------------------
# Layout builders. Each returns (nodes, edges); lanes are independent chains
# so the scene graph stays acyclic.
# ---------------------------------------------------------------------------


class _GraphBuilder:
    def __init__(self):
        self.nodes: dict[int, np.ndarray] = {}
        self.edges: list[Edge] = []
        self._next = 0

    def _new_node(self, p: np.ndarray) -> int:
        nid = self._next
        self._next += 1
        self.nodes[nid] = np.asarray(p, dtype=np.float64)
        return nid

    def add_lane(
        self,
        pts: np.ndarray,
        width: float,
        seg_len: float = 60.0,
        first_id: int | None = None,
        last_id: int | None = None,
    ) -> tuple[int, int]:
        """One directed lane as a chain of edges subdivided to ~seg_len,
        keeping the full curve geometry inside each edge.

        ``first_id``/``last_id`` attach the chain to existing nodes, which is
        how merges and splits share geometry.
        """
        poly = Polyline(pts)
        cum = poly.arclengths()
        total = cum[-1]
        n_seg = max(1, int(np.ceil(total / seg_len)))
        cuts = np.linspace(0.0, total, n_seg + 1)

        def point_at(s: float) -> np.ndarray:
            return np.array(
                [np.interp(s, cum, poly.pts[:, 0]), np.interp(s, cum, poly.pts[:, 1])]
            )

        ids = []
        for k, s in enumerate(cuts):
            if k == 0 and first_id is not None:
                ids.append(first_id)
            elif k == n_seg and last_id is not None:
                ids.append(last_id)
            else:
                ids.append(self._new_node(point_at(s)))
        for k in range(n_seg):
            inner = (cum > cuts[k] + 1e-9) & (cum < cuts[k + 1] - 1e-9)
            geom_pts = np.concatenate(
                [
                    self.nodes[ids[k]][None, :],
                    poly.pts[inner],
                    self.nodes[ids[k + 1]][None, :],
                ]
            )
            self.edges.append(Edge(ids[k], ids[k + 1], Polyline(geom_pts), width))
        return ids[0], ids[-1]

    def build(self) -> MapGraph:
        return MapGraph(self.nodes, self.edges)


def _rot(pts: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, -s], [s, c]]).T


def _layout_straight(b: _GraphBuilder, width: float, rng: np.random.Generator):
    # one lane at a seed-dependent heading and lateral offset
    angle = rng.uniform(0.0, 2 * np.pi)
    offset = rng.uniform(-10.0, 10.0)
    pts = np.array([[-90.0, offset], [90.0, offset]])
    b.add_lane(_rot(pts, angle), width)


def _layout_curve(b: _GraphBuilder, width: float, rng: np.random.Generator):
    radius = rng.uniform(45.0, 120.0)
    span = rng.uniform(np.pi / 3, 2 * np.pi / 3)
    angle = rng.uniform(0.0, 2 * np.pi)
    theta = np.linspace(-span / 2, span / 2, 33)
    pts = np.stack([radius * np.sin(theta), radius * np.cos(theta) - radius], axis=1)
    b.add_lane(_rot(pts, angle), width)


def _layout_merge(b: _GraphBuilder, width: float, rng: np.random.Generator):
    # mainline plus an on-ramp joining it at the origin; downstream edges
    # are shared so the two paths merge in the graph
    angle = rng.uniform(0.0, 2 * np.pi)
    side = 1.0 if rng.random() < 0.5 else -1.0
    _, join = b.add_lane(_rot(np.array([[-90.0, 0.0], [0.0, 0.0]]), angle), width)
    b.add_lane(_rot(np.array([[0.0, 0.0], [90.0, 0.0]]), angle), width, first_id=join)
    xs = np.linspace(-90.0, 0.0, 16)
    ys = side * 2.5 * width * 0.5 * (1 + np.cos(np.pi * (xs + 90.0) / 90.0))
    ramp = np.stack([xs, ys], axis=1)
    ramp[-1] = [0.0, 0.0]
    b.add_lane(_rot(ramp, angle), width, last_id=join)


def _layout_intersection(b: _GraphBuilder, width: float, rng: np.random.Generator):
    angle = rng.uniform(0.0, np.pi / 2)
    off = 0.5 * width
    for pts in (
        [[-90.0, -off], [90.0, -off]],
        [[90.0, off], [-90.0, off]],
        [[-off, 90.0], [-off, -90.0]],
        [[off, -90.0], [off, 90.0]],
    ):
        b.add_lane(_rot(np.array(pts), angle), width)


def _layout_grid(b: _GraphBuilder, width: float, rng: np.random.Generator,
                 spacing: float = 75.0, n: int = 4):
    off = 0.5 * width
    span = spacing * (n - 1)
    for k in range(n):
        y = k * spacing - span / 2
        b.add_lane(np.array([[-span / 2 - 30.0, y - off], [span / 2 + 30.0, y - off]]), width)
        b.add_lane(np.array([[span / 2 + 30.0, y + off], [-span / 2 - 30.0, y + off]]), width)
    for k in range(n):
        x = k * spacing - span / 2
        b.add_lane(np.array([[x - off, span / 2 + 30.0], [x - off, -span / 2 - 30.0]]), width)
        b.add_lane(np.array([[x + off, -span / 2 - 30.0], [x + off, span / 2 + 30.0]]), width)


_LAYOUT_BUILDERS = {
    "straight": _layout_straight,
    "curve": _layout_curve,
    "merge": _layout_merge,
    "intersection": _layout_intersection,
    "grid": _layout_grid,
}


# ---------------------------------------------------------------------------
# Trajectory synthesis
# ---------------------------------------------------------------------------


def _point_on_path(poly: Polyline, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and unit tangents at arclengths ``s`` (clamped to the path)."""
    cum = poly.arclengths()
    s = np.clip(s, 0.0, cum[-1])
    x = np.interp(s, cum, poly.pts[:, 0])
    y = np.interp(s, cum, poly.pts[:, 1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2)
    seg = poly.pts[idx + 1] - poly.pts[idx]
    norm = np.linalg.norm(seg, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    return np.stack([x, y], axis=1), seg / norm


def _drive_path(
    poly: Polyline, rng: np.random.Generator, noise_sigma: float
) -> Trajectory | None:
    total = poly.length()
    dt = 1.0 / TRAJECTORY_RATE_HZ
    v_base = rng.uniform(8.0, 16.0)
    v_amp = rng.uniform(0.0, 3.0)
    v_phase = rng.uniform(0.0, 2 * np.pi)
    s0 = rng.uniform(0.0, min(1.5, 0.1 * total))

    s_list, v_list = [], []
    s = s0
    while s < total - 1e-9:
        v = float(np.clip(v_base + v_amp * np.sin(2 * np.pi * s / 200.0 + v_phase), 5.0, 20.0))
        s_list.append(s)
        v_list.append(v)
        jitter = rng.normal(0.0, 0.5 * noise_sigma)
        s = s + v * dt + jitter
    if len(s_list) < 2:
        return None

    s_arr = np.array(s_list)
    v_arr = np.array(v_list)
    pos, tan = _point_on_path(poly, s_arr)

    if noise_sigma > 0.0:
        # Ornstein-Uhlenbeck lateral wander: stationary std == noise_sigma
        rho = np.exp(-dt / 3.0)
        eps = rng.normal(0.0, noise_sigma, size=len(s_arr))
        lat = np.empty(len(s_arr))
        lat[0] = eps[0]
        for i in range(1, len(s_arr)):
            lat[i] = rho * lat[i - 1] + np.sqrt(1 - rho * rho) * eps[i]
        normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
        pos = pos + lat[:, None] * normal

    t0 = rng.uniform(0.0, 1.0e5)
    t = t0 + dt * np.arange(len(s_arr))
    source = "ego" if rng.random() < 0.5 else "tracked"
    return Trajectory(xy=pos, t=t, v=v_arr, source=source)


def generate_scene(
    layout: str,
    density: float = 5,
    noise_sigma: float = 0.3,
    seed: int = 0,
    lane_width: float = 3.5,
) -> Scene:
    """Build a synthetic world: a road layout plus ``density`` noisy drives
    per lane. Deterministic for a fixed seed."""
    if layout not in _LAYOUT_BUILDERS:
        raise UnknownLayout(
            f"unknown layout {layout!r}; choose one of {', '.join(LAYOUTS)}"
        )
    if density < 1:
        raise ValueError("density must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")

    rng = np.random.default_rng(np.random.PCG64(seed))
    builder = _GraphBuilder()
    _LAYOUT_BUILDERS[layout](builder, lane_width, rng)
    graph = builder.build()

    trajectories: list[Trajectory] = []
    for poly, _width in path_records(graph):
        n = int(density) + (1 if rng.random() < (density - int(density)) else 0)
        for _ in range(n):
            tr = _drive_path(poly, rng, noise_sigma)
            if tr is not None:
                trajectories.append(tr)
    return Scene(graph=graph, trajectories=trajectories, rng_seed=seed)


# ---------------------------------------------------------------------------
# Scene file format (.lgs): JSON with a format_version marker
# ---------------------------------------------------------------------------


def export_scene(scene: Scene, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "rng_seed": scene.rng_seed,
        "map": {
            "nodes": [
                [nid, float(p[0]), float(p[1])]
                for nid, p in sorted(scene.graph.nodes.items())
            ],
            "edges": [
                {
                    "from": e.from_id,
                    "to": e.to_id,
                    "width": e.lane_width,
                    "points": [[float(x), float(y)] for x, y in e.geometry.pts],
                }
                for e in scene.graph.edges
            ],
        },
        "trajectories": [
            {
                "source": tr.source,
                "points": [
                    [float(x), float(y), float(t), float(v)]
                    for (x, y), t, v in zip(tr.xy, tr.t, tr.v)
                ],
            }
            for tr in scene.trajectories
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def _need(doc: dict, key: str, where: str):
    if key not in doc:
        raise MalformedScene(f"missing field {key!r} in {where}")
    return doc[key]


def import_scene(path) -> Scene:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedScene(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedScene("top level must be an object")
    version = _need(doc, "format_version", "scene file")
    if version != FORMAT_VERSION:
        raise MalformedScene(f"unsupported format_version {version!r}")

    map_doc = _need(doc, "map", "scene file")
    nodes: dict[int, np.ndarray] = {}
    for i, row in enumerate(_need(map_doc, "nodes", "map")):
        try:
            nid, x, y = row
            nodes[int(nid)] = np.array([float(x), float(y)])
        except (TypeError, ValueError) as exc:
            raise MalformedScene(f"map.nodes[{i}] must be [id, x, y]") from exc

    edges: list[Edge] = []
    for i, e in enumerate(_need(map_doc, "edges", "map")):
        try:
            pts = np.asarray(_need(e, "points", f"map.edges[{i}]"), dtype=np.float64)
            width = e.get("width")
            edges.append(
                Edge(
                    int(_need(e, "from", f"map.edges[{i}]")),
                    int(_need(e, "to", f"map.edges[{i}]")),
                    Polyline(pts),
                    None if width is None else float(width),
                )
            )
        except MalformedScene:
            raise
        except (TypeError, ValueError) as exc:
            raise MalformedScene(f"map.edges[{i}] is malformed: {exc}") from exc

    trajectories: list[Trajectory] = []
    for i, tr in enumerate(doc.get("trajectories", [])):
        try:
            pts = np.asarray(_need(tr, "points", f"trajectories[{i}]"), dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 4:
                raise ValueError("points must be rows of [x, y, t, v]")
            trajectories.append(
                Trajectory(
                    xy=pts[:, :2],
                    t=pts[:, 2],
                    v=pts[:, 3],
                    source=str(_need(tr, "source", f"trajectories[{i}]")),
                )
            )
        except MalformedScene:
            raise
        except (TypeError, ValueError) as exc:
            raise MalformedScene(f"trajectories[{i}] is malformed: {exc}") from exc

    try:
        graph = MapGraph(nodes, edges)
        return Scene(graph=graph, trajectories=trajectories, rng_seed=int(doc.get("rng_seed", 0)))
    except ValueError as exc:
        raise MalformedScene(str(exc)) from exc


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Exact structural equality on the scene data model."""
    if a.rng_seed != b.rng_seed:
        return False
    if sorted(a.graph.nodes) != sorted(b.graph.nodes):
        return False
    if any(not np.array_equal(a.graph.nodes[k], b.graph.nodes[k]) for k in a.graph.nodes):
        return False
    if len(a.graph.edges) != len(b.graph.edges) or len(a.trajectories) != len(b.trajectories):
        return False
    for ea, eb in zip(a.graph.edges, b.graph.edges):
        if (ea.from_id, ea.to_id, ea.lane_width) != (eb.from_id, eb.to_id, eb.lane_width):
            return False
        if not np.array_equal(ea.geometry.pts, eb.geometry.pts):
            return False
    for ta, tb in zip(a.trajectories, b.trajectories):
        if ta.source != tb.source:
            return False
        if not (
            np.array_equal(ta.xy, tb.xy)
            and np.array_equal(ta.t, tb.t)
            and np.array_equal(ta.v, tb.v)
        ):
            return False
    return True
