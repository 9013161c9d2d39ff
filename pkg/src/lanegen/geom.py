"""2-D geometry primitives: polylines, resampling, rigid transforms, distances.

All geometry is double precision. Objects are immutable after construction
and all operations are pure functions, so everything here is safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePolyline, EmptyInput
from .validation import as_points, check_finite


class Polyline:
    """Ordered sequence of at least two 2-D points.

    Consecutive exact-duplicate points are removed at construction. The
    underlying array is read-only.
    """

    __slots__ = ("pts",)

    def __init__(self, points):
        arr = as_points(points, "polyline points")
        if len(arr) >= 2:
            keep = np.ones(len(arr), dtype=bool)
            keep[1:] = np.any(arr[1:] != arr[:-1], axis=1)
            arr = arr[keep]
        if len(arr) < 2:
            raise ValueError(f"polyline needs >= 2 distinct points, got {len(arr)}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "pts", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Polyline is immutable")

    def __len__(self) -> int:
        return len(self.pts)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Polyline)
            and self.pts.shape == other.pts.shape
            and bool(np.all(self.pts == other.pts))
        )

    def __hash__(self):
        return hash(self.pts.tobytes())

    def __repr__(self) -> str:
        return f"Polyline({len(self.pts)} pts, length={self.length():.3f})"

    def arclengths(self) -> np.ndarray:
        """Cumulative arclength at each vertex, starting at 0."""
        seg = np.linalg.norm(np.diff(self.pts, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def length(self) -> float:
        return float(self.arclengths()[-1])

    def reversed(self) -> "Polyline":
        return Polyline(self.pts[::-1])


@dataclass(frozen=True)
class RigidTransform2:
    """Rotation (radians, counter-clockwise) followed by translation."""

    rotation: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(2)
        check_finite(t, "translation")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", float(self.rotation))

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix().T + self.translation

    def compose(self, other: "RigidTransform2") -> "RigidTransform2":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform2(
            self.rotation + other.rotation,
            self.apply(other.translation.reshape(1, 2))[0],
        )

    def inverse(self) -> "RigidTransform2":
        c, s = np.cos(-self.rotation), np.sin(-self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return RigidTransform2(-self.rotation, -(rot @ self.translation))


def apply_transform(t: RigidTransform2, p: Polyline) -> Polyline:
    """Rotate then translate every point of ``p``."""
    return Polyline(t.apply(p.pts))


def resample(p: Polyline, m: int) -> Polyline:
    """Resample ``p`` to exactly ``m`` points equally spaced by arclength.

    First and last output points coincide with the input endpoints.
    """
    if m < 2:
        raise ValueError(f"resample needs m >= 2, got {m}")
    cum = p.arclengths()
    total = cum[-1]
    if total <= 0.0:
        raise DegeneratePolyline("cannot resample a zero-length polyline")
    targets = np.linspace(0.0, total, m)
    x = np.interp(targets, cum, p.pts[:, 0])
    y = np.interp(targets, cum, p.pts[:, 1])
    out = np.stack([x, y], axis=1)
    out[0] = p.pts[0]
    out[-1] = p.pts[-1]
    return Polyline(out)


def _point_set(obj) -> np.ndarray:
    if isinstance(obj, Polyline):
        return obj.pts
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim == 1 and arr.shape == (2,):
        arr = arr[None, :]
    if arr.size == 0:
        raise EmptyInput("empty point set")
    return as_points(arr, "point set")


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) matrix of Euclidean distances."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance between two point sets.

    Mean over ``a`` of the nearest distance to ``b``, plus the mean over
    ``b`` of the nearest distance to ``a``, divided by 2. Polyline inputs
    contribute their vertices. This single definition is used everywhere a
    Chamfer distance appears (filtering, evaluation, tests).
    """
    pa, pb = _point_set(a), _point_set(b)
    d = pairwise_distances(pa, pb)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def densified_chamfer(a: Polyline, b: Polyline, spacing: float = 1.0) -> float:
    """Chamfer distance after resampling both polylines to ~``spacing`` m.

    Used for spatial-consistency gating so the measure does not depend on
    how sparsely either polyline happens to be sampled.
    """
    def dense(p: Polyline) -> Polyline:
        n = max(2, int(np.ceil(p.length() / spacing)) + 1)
        return resample(p, n)

    return chamfer_distance(dense(a), dense(b))


def project_arclength(p: Polyline, q) -> float:
    """Arclength position of the projection of point ``q`` onto ``p``.

    The projection parameter is unclamped past the first and last segment,
    so points beyond the ends map to negative values or values above the
    total length.
    """
    q = np.asarray(q, dtype=np.float64).reshape(2)
    pts = p.pts
    seg = pts[1:] - pts[:-1]
    seg_len2 = np.einsum("ij,ij->i", seg, seg)
    t = np.einsum("ij,ij->i", q[None, :] - pts[:-1], seg) / seg_len2
    tc = np.clip(t, 0.0, 1.0)
    proj = pts[:-1] + tc[:, None] * seg
    dist2 = np.einsum("ij,ij->i", proj - q, proj - q)
    i = int(np.argmin(dist2))
    cum = p.arclengths()
    seg_len = np.sqrt(seg_len2)
    ti = t[i]
    if i == 0 and ti < 0.0:
        return float(ti * seg_len[0])
    if i == len(seg) - 1 and ti > 1.0:
        return float(cum[-1] + (ti - 1.0) * seg_len[-1])
    return float(cum[i] + np.clip(ti, 0.0, 1.0) * seg_len[i])


def clip_polyline_to_box(
    pts: np.ndarray,
    half_w: float,
    half_h: float,
    values: list[np.ndarray] | None = None,
):
    """Clip a polyline to the axis-aligned box [-half_w, half_w] x [-half_h, half_h].

    Returns a list of runs, one per contiguous in-box piece with >= 2 points.
    Each run is ``(points, clipped_values)`` where ``clipped_values`` linearly
    interpolates the optional per-point payloads (e.g. timestamps, speeds) at
    the cut positions.
    """
    pts = np.asarray(pts, dtype=np.float64)
    values = values or []
    lo = np.array([-half_w, -half_h])
    hi = np.array([half_w, half_h])

    runs: list[tuple[np.ndarray, list[np.ndarray]]] = []
    cur_pts: list[np.ndarray] = []
    cur_vals: list[list[float]] = [[] for _ in values]

    def flush():
        nonlocal cur_pts, cur_vals
        if len(cur_pts) >= 2:
            arr = np.array(cur_pts)
            if np.any(np.any(arr[1:] != arr[:-1], axis=1)):
                runs.append((arr, [np.array(v) for v in cur_vals]))
        cur_pts = []
        cur_vals = [[] for _ in values]

    def emit(point, frac, i):
        if cur_pts and np.all(cur_pts[-1] == point):
            return
        cur_pts.append(point)
        for k, v in enumerate(values):
            cur_vals[k].append(v[i] + frac * (v[i + 1] - v[i]))

    for i in range(len(pts) - 1):
        p0, p1 = pts[i], pts[i + 1]
        d = p1 - p0
        t0, t1 = 0.0, 1.0
        ok = True
        for axis in range(2):
            if d[axis] == 0.0:
                if p0[axis] < lo[axis] or p0[axis] > hi[axis]:
                    ok = False
                    break
            else:
                ta = (lo[axis] - p0[axis]) / d[axis]
                tb = (hi[axis] - p0[axis]) / d[axis]
                if ta > tb:
                    ta, tb = tb, ta
                t0, t1 = max(t0, ta), min(t1, tb)
        if not ok or t0 > t1:
            flush()
            continue
        emit(p0 + t0 * d, t0, i)
        emit(p0 + t1 * d, t1, i)
        if t1 < 1.0:
            flush()
    flush()
    return runs
