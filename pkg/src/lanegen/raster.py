"""Trajectory rasterization into the 6-channel model input.

Channel order: [R, G, B, mean_velocity, offset_x, offset_y].
Hue encodes travel direction, saturation is fixed at 1, value encodes how
often a pixel is occupied (log-scaled). The velocity channel is the mean
speed normalized by ``v_max``; the offset channels recover the sub-pixel
position of the trajectory points inside each occupied pixel.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .base import ParamMixin
from .errors import EmptyTile, ZeroDirection
from .tiling import Tile

N_CHANNELS = 6

# hue histogram bins used to resolve pixels where opposing flows cancel
_N_DIR_BINS = 16


@dataclass(frozen=True)
class RasterTensor:
    """C x H x W single-precision image plus its ground resolution."""

    channels: np.ndarray  # float32, shape (6, H, W)
    resolution: float  # meters per pixel

    def __post_init__(self):
        arr = np.asarray(self.channels, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != N_CHANNELS:
            raise ValueError(f"expected ({N_CHANNELS}, H, W) channels, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "channels", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels.shape

    def rgb(self) -> np.ndarray:
        return self.channels[:3]


@dataclass
class PixelAccumulator:
    """Per-pixel sums gathered while walking trajectory segments."""

    count: np.ndarray  # (H, W) float64
    dir_sum: np.ndarray  # (2, H, W) unit direction vector sums
    speed_sum: np.ndarray  # (H, W)
    pos_sum: np.ndarray  # (2, H, W) sums of positions in pixel units
    dir_bin_count: np.ndarray  # (_N_DIR_BINS, H, W)
    dir_bin_sum: np.ndarray  # (2, _N_DIR_BINS, H, W)

    @classmethod
    def zeros(cls, h: int, w: int) -> "PixelAccumulator":
        return cls(
            count=np.zeros((h, w)),
            dir_sum=np.zeros((2, h, w)),
            speed_sum=np.zeros((h, w)),
            pos_sum=np.zeros((2, h, w)),
            dir_bin_count=np.zeros((_N_DIR_BINS, h, w)),
            dir_bin_sum=np.zeros((2, _N_DIR_BINS, h, w)),
        )


def hue_from_direction(dx: float, dy: float) -> float:
    """Map a direction vector to hue in [0, 1): atan2 angle over 2*pi."""
    if dx == 0.0 and dy == 0.0:
        raise ZeroDirection("direction vector must be nonzero")
    angle = np.arctan2(dy, dx) % (2 * np.pi)
    return float(angle / (2 * np.pi))


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Standard HSV -> RGB conversion, vectorized; returns (3, ...) array."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _sample_trajectory(tr_xy: np.ndarray, tr_v: np.ndarray, step: float):
    """Points sampled along each segment at ~``step`` spacing, with the unit
    direction of the segment each sample came from and the linearly
    interpolated speed. Shared segment endpoints are emitted once."""
    seg_vec = tr_xy[1:] - tr_xy[:-1]
    seg_len = np.linalg.norm(seg_vec, axis=1)
    pts_out, dir_out, spd_out = [], [], []
    first = True
    for a, vec, length, v0, v1 in zip(
        tr_xy[:-1], seg_vec, seg_len, tr_v[:-1], tr_v[1:]
    ):
        if length == 0.0:
            continue
        n = max(2, int(np.ceil(length / step)) + 1)
        t = np.linspace(0.0, 1.0, n)
        if not first:
            t = t[1:]
        first = False
        pts_out.append(a + t[:, None] * vec)
        dir_out.append(np.tile(vec / length, (len(t), 1)))
        spd_out.append(v0 + t * (v1 - v0))
    if not pts_out:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    return np.concatenate(pts_out), np.concatenate(dir_out), np.concatenate(spd_out)


def _accumulate(acc: PixelAccumulator, tile: Tile, h: int, w: int, step: float):
    half_w, half_h = tile.half_w, tile.half_h
    res_x = tile.width / w
    res_y = tile.height / h
    for tr in tile.trajectories:
        pts, dirs, speeds = _sample_trajectory(tr.xy, tr.v, step)
        if len(pts) == 0:
            continue
        # pixel coordinates: x right, y up; row 0 is the top of the image
        px = (pts[:, 0] + half_w) / res_x
        py = (half_h - pts[:, 1]) / res_y
        ix = np.clip(px.astype(int), 0, w - 1)
        iy = np.clip(py.astype(int), 0, h - 1)
        flat = iy * w + ix
        np.add.at(acc.count.ravel(), flat, 1.0)
        np.add.at(acc.dir_sum[0].ravel(), flat, dirs[:, 0])
        np.add.at(acc.dir_sum[1].ravel(), flat, dirs[:, 1])
        np.add.at(acc.speed_sum.ravel(), flat, speeds)
        np.add.at(acc.pos_sum[0].ravel(), flat, px)
        np.add.at(acc.pos_sum[1].ravel(), flat, py)
        angles = np.arctan2(dirs[:, 1], dirs[:, 0]) % (2 * np.pi)
        bins = np.minimum(
            (angles / (2 * np.pi) * _N_DIR_BINS).astype(int), _N_DIR_BINS - 1
        )
        flat_b = bins * (h * w) + flat
        np.add.at(acc.dir_bin_count.ravel(), flat_b, 1.0)
        np.add.at(acc.dir_bin_sum[0].ravel(), flat_b, dirs[:, 0])
        np.add.at(acc.dir_bin_sum[1].ravel(), flat_b, dirs[:, 1])


def _resolve_hue(acc: PixelAccumulator, occupied: np.ndarray) -> np.ndarray:
    """Hue per occupied pixel: circular mean of the contributing directions.

    Where opposing flows nearly cancel (resultant < 0.1 * count) the mean is
    meaningless; those pixels keep the direction of the majority histogram
    bin, ties broken toward the smaller angle.
    """
    dir_x = acc.dir_sum[0][occupied]
    dir_y = acc.dir_sum[1][occupied]
    count = acc.count[occupied]
    resultant = np.hypot(dir_x, dir_y)
    conflict = resultant < 0.1 * count

    if np.any(conflict):
        bin_counts = acc.dir_bin_count[:, occupied][:, conflict]
        major = np.argmax(bin_counts, axis=0)  # argmax: first (smallest-angle) bin
        sel = acc.dir_bin_sum[:, :, occupied][:, :, conflict]
        cols = np.arange(conflict.sum())
        dir_x = dir_x.copy()
        dir_y = dir_y.copy()
        dir_x[conflict] = sel[0, major, cols]
        dir_y[conflict] = sel[1, major, cols]

    angle = np.arctan2(dir_y, dir_x) % (2 * np.pi)
    return angle / (2 * np.pi)


def rasterize(
    tile: Tile,
    h: int = 512,
    w: int = 512,
    v_max: float = 30.0,
    intensity_scale: float = 1000.0,
    apply_patch_masks: bool = True,
) -> RasterTensor:
    """Rasterize a tile's trajectories into the 6-channel input image."""
    if h < 32 or w < 32:
        raise ValueError(f"raster size must be >= 32, got {h}x{w}")
    if not tile.trajectories:
        raise EmptyTile(f"tile {tile.tile_id} has no trajectories to rasterize")

    resolution = tile.width / w
    step = resolution / 2.0
    acc = PixelAccumulator.zeros(h, w)
    _accumulate(acc, tile, h, w, step)

    occupied = acc.count > 0
    channels = np.zeros((N_CHANNELS, h, w), dtype=np.float64)
    if np.any(occupied):
        count = acc.count[occupied]
        hue = _resolve_hue(acc, occupied)
        # log-compressed occupancy ratio: invariant under duplicating every
        # trajectory, and a dense pixel cannot drown out sparse ones
        value = np.log1p(intensity_scale * count / count.max()) / np.log1p(
            intensity_scale
        )
        rgb = hsv_to_rgb(hue, np.ones_like(hue), value)
        for c in range(3):
            channels[c][occupied] = rgb[c]
        channels[3][occupied] = np.minimum(acc.speed_sum[occupied] / count / v_max, 1.0)
        iy, ix = np.nonzero(occupied)
        mean_px = acc.pos_sum[0][occupied] / count
        mean_py = acc.pos_sum[1][occupied] / count
        channels[4][occupied] = np.clip(mean_px - (ix + 0.5), -0.5, 0.5)
        channels[5][occupied] = np.clip(mean_py - (iy + 0.5), -0.5, 0.5)

    if apply_patch_masks:
        for x0, y0, mw, mh in tile.patch_masks:
            c0, c1 = int(np.floor(x0 * w)), int(np.ceil((x0 + mw) * w))
            r0, r1 = int(np.floor(y0 * h)), int(np.ceil((y0 + mh) * h))
            channels[:, r0:r1, c0:c1] = 0.0

    return RasterTensor(channels=channels.astype(np.float32), resolution=resolution)


def raster_roundtrip_check(t: RasterTensor, tile: Tile) -> dict:
    """Decode per-pixel hue back to an angle and compare against the circular
    mean of the directions that touched the pixel. Returns a report dict."""
    h, w = t.shape[1], t.shape[2]
    step = t.resolution / 2.0
    acc = PixelAccumulator.zeros(h, w)
    _accumulate(acc, tile, h, w, step)
    occupied = acc.count > 0
    if tile.patch_masks:
        for x0, y0, mw, mh in tile.patch_masks:
            c0, c1 = int(np.floor(x0 * w)), int(np.ceil((x0 + mw) * w))
            r0, r1 = int(np.floor(y0 * h)), int(np.ceil((y0 + mh) * h))
            occupied[r0:r1, c0:c1] = False

    expected = _resolve_hue(acc, occupied) * 2 * np.pi
    decoded = rgb_to_hue(t.channels[0][occupied], t.channels[1][occupied],
                         t.channels[2][occupied]) * 2 * np.pi
    diff = np.abs(decoded - expected)
    diff = np.minimum(diff, 2 * np.pi - diff)
    max_err = float(diff.max()) if diff.size else 0.0
    return {
        "pixels_checked": int(occupied.sum()),
        "max_angle_error_rad": max_err,
        "passed": bool(max_err < 1e-6),
    }


def rgb_to_hue(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Invert hsv_to_rgb for saturation-1 colors; hue in [0, 1)."""
    r, g, b = np.asarray(r, float), np.asarray(g, float), np.asarray(b, float)
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    hue = np.zeros_like(r)
    safe = delta > 0
    rmax = safe & (mx == r)
    gmax = safe & (mx == g) & ~rmax
    bmax = safe & (mx == b) & ~rmax & ~gmax
    hue[rmax] = ((g[rmax] - b[rmax]) / delta[rmax]) % 6.0
    hue[gmax] = (b[gmax] - r[gmax]) / delta[gmax] + 2.0
    hue[bmax] = (r[bmax] - g[bmax]) / delta[bmax] + 4.0
    return hue / 6.0


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------


class TrajectoryRasterizer(ParamMixin):
    """Tiles -> raster tensors transformer."""

    def __init__(self, size: int = 512, v_max: float = 30.0):
        self.size = size
        self.v_max = v_max

    def fit(self, X=None, y=None):
        return self

    def transform(self, tiles: list[Tile]) -> list[RasterTensor]:
        return [
            rasterize(t, self.size, self.size, v_max=self.v_max) for t in tiles
        ]

    def fit_transform(self, tiles: list[Tile], y=None) -> list[RasterTensor]:
        return self.fit(tiles, y).transform(tiles)


# ---------------------------------------------------------------------------
# Binary dump + PNG preview
# ---------------------------------------------------------------------------

_MAGIC = b"LGRT"
_VERSION = 1


def save_raster(t: RasterTensor, path) -> None:
    c, h, w = t.shape
    header = _MAGIC + struct.pack("<IIIIf", _VERSION, c, h, w, t.resolution)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(t.channels, dtype="<f4").tobytes())


def load_raster(path) -> RasterTensor:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a raster dump (bad magic)")
    version, c, h, w, resolution = struct.unpack("<IIIIf", blob[4:24])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported raster version {version}")
    data = np.frombuffer(blob[24:], dtype="<f4").reshape(c, h, w)
    return RasterTensor(channels=data, resolution=resolution)


def write_png(path, rgb: np.ndarray) -> None:
    """Minimal 8-bit RGB PNG writer for human inspection of the color
    channels. Lossy; never read back."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected (3, H, W) RGB array")
    img = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = img.shape
    raw = b"".join(b"\x00" + img[row].tobytes() for row in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        out = tag + payload
        return struct.pack(">I", len(payload)) + out + struct.pack(
            ">I", zlib.crc32(out) & 0xFFFFFFFF
        )

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", ihdr))
        f.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(chunk(b"IEND", b""))
