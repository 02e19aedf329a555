"""Point-cloud ingestion, trajectory-aligned cropping and 4-channel BEV rasterization.

Clouds are float64 arrays of shape (n, 4) with columns x, y, z, r. Grid cells
use half-open membership [lo, hi) on both axes; BEV planes are indexed
[channel, row, col] with row along +y and col along +x.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometryError, ParseError
from .polyline import cumulative_length, interpolate_at

PC_MAGIC = b"LGPC"
BEV_MAGIC = b"LGBV"
_BEV_HEADER = struct.Struct("<4s2dIId")

DEFAULT_SIDE = 25.0
DEFAULT_PIXELS = 800
DEFAULT_RESOLUTION = DEFAULT_SIDE / DEFAULT_PIXELS
DEFAULT_STRIDE = 13.0

CHANNELS = ("intensity", "density", "height_var", "height_min")


class CloudPoint(NamedTuple):
    x: float
    y: float
    z: float
    r: float


def as_cloud(points):
    """Validate points into an (n, 4) float array."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.empty((0, 4))
    arr = arr.reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cloud has non-finite values")
    if np.any(arr[:, 3] < 0):
        raise ValueError("cloud has negative intensity")
    return arr


def load_point_cloud(path):
    data = Path(path).read_bytes()
    if data[:4] == PC_MAGIC:
        return _parse_binary(data)
    return _parse_csv(data.decode("utf-8"))


def _parse_binary(data):
    if len(data) < 8:
        raise ParseError("truncated point-cloud header", offset=len(data))
    (count,) = struct.unpack_from("<I", data, 4)
    need = 8 + 32 * count
    if len(data) != need:
        raise ParseError(f"expected {count} points ({need} bytes), got {len(data)} bytes",
                         offset=min(len(data), need))
    arr = np.frombuffer(data, dtype="<f8", count=4 * count, offset=8).reshape(count, 4).copy()
    bad = ~np.all(np.isfinite(arr), axis=1) | (arr[:, 3] < 0)
    if bad.any():
        k = int(np.argmax(bad))
        raise ParseError(f"invalid point record {k}", offset=8 + 32 * k)
    return arr


def _parse_csv(text):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", line=lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line=lineno) from None
        if not all(np.isfinite(vals)) or vals[3] < 0:
            raise ParseError("non-finite coordinate or negative intensity", line=lineno)
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 4)


def save_point_cloud(path, cloud, fmt="binary"):
    cloud = as_cloud(cloud)
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(PC_MAGIC + struct.pack("<I", len(cloud)) + cloud.astype("<f8").tobytes())
    elif fmt == "csv":
        path.write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in cloud))
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")


@dataclass(frozen=True)
class GridSpec:
    origin: tuple = (0.0, 0.0)
    width_px: int = DEFAULT_PIXELS
    height_px: int = DEFAULT_PIXELS
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("grid dimensions must be positive")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")

    @property
    def extent(self):
        return self.width_px * self.resolution, self.height_px * self.resolution

    @property
    def bounds(self):
        """(xmin, ymin, xmax, ymax); the max edges are exclusive."""
        w, h = self.extent
        return self.origin[0], self.origin[1], self.origin[0] + w, self.origin[1] + h

    def contains(self, xy):
        xy = np.asarray(xy, dtype=float)
        x0, y0, x1, y1 = self.bounds
        return (xy[..., 0] >= x0) & (xy[..., 0] < x1) & (xy[..., 1] >= y0) & (xy[..., 1] < y1)

    def cell_index(self, xy):
        """(row, col) integer indices; out-of-grid points get indices outside range."""
        xy = np.asarray(xy, dtype=float)
        col = np.floor((xy[..., 0] - self.origin[0]) / self.resolution).astype(np.int64)
        row = np.floor((xy[..., 1] - self.origin[1]) / self.resolution).astype(np.int64)
        return row, col

    def cell_centers(self, rows, cols):
        x = self.origin[0] + (np.asarray(cols) + 0.5) * self.resolution
        y = self.origin[1] + (np.asarray(rows) + 0.5) * self.resolution
        return np.stack([x, y], axis=-1)

    def to_dict(self):
        return {"origin": list(self.origin), "width_px": self.width_px,
                "height_px": self.height_px, "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["origin"]), int(d["width_px"]), int(d["height_px"]), float(d["resolution"]))


@dataclass
class BevMap:
    spec: GridSpec
    channels: np.ndarray  # (4, height_px, width_px)

    @property
    def intensity(self):
        return self.channels[0]

    @property
    def density(self):
        return self.channels[1]

    @property
    def height_var(self):
        return self.channels[2]

    @property
    def height_min(self):
        return self.channels[3]


def crop_regions(cloud, trajectory, side=DEFAULT_SIDE, stride=DEFAULT_STRIDE,
                 resolution=DEFAULT_RESOLUTION):
    """Square regions centred every ``stride`` metres of trajectory arc length.

    Returns (GridSpec, points) pairs; each region holds exactly the points in
    its half-open side x side square.
    """
    if not side > 0 or not stride > 0:
        raise ValueError("side and stride must be positive")
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim != 2 or len(traj) < 2:
        raise ValueError("trajectory needs at least 2 vertices")
    traj3 = np.zeros((len(traj), 3))
    traj3[:, :2] = traj[:, :2]
    cum = cumulative_length(traj3)
    if cum[-1] <= 0:
        raise DegenerateGeometryError("trajectory has zero length")
    n = int(np.floor(cum[-1] / stride + 1e-9))
    centres = interpolate_at(traj3, stride * np.arange(n + 1), cum)[:, :2]
    cloud = as_cloud(cloud)
    px = int(round(side / resolution))
    out = []
    for c in centres:
        spec = GridSpec((c[0] - side / 2, c[1] - side / 2), px, px, resolution)
        out.append((spec, cloud[spec.contains(cloud[:, :2])]))
    return out


def rasterize(points, spec):
    """Per cell: mean intensity, point count, population variance of z, min z.

    Points are sorted by (cell, x, y, z, r) before accumulation so the result
    is bit-identical for any input ordering. Empty cells are zero in every
    channel.
    """
    cloud = as_cloud(points)
    H, W = spec.height_px, spec.width_px
    row, col = spec.cell_index(cloud[:, :2])
    inside = (row >= 0) & (row < H) & (col >= 0) & (col < W)
    cloud = cloud[inside]
    cell = row[inside] * W + col[inside]
    order = np.lexsort((cloud[:, 3], cloud[:, 2], cloud[:, 1], cloud[:, 0], cell))
    cell = cell[order]
    z = cloud[order, 2]
    r = cloud[order, 3]

    n_cells = H * W
    count = np.bincount(cell, minlength=n_cells).astype(float)
    nonempty = count > 0
    safe = np.where(nonempty, count, 1.0)
    mean_r = np.bincount(cell, weights=r, minlength=n_cells) / safe
    mean_z = np.bincount(cell, weights=z, minlength=n_cells) / safe
    dev = z - mean_z[cell]
    var_z = np.bincount(cell, weights=dev * dev, minlength=n_cells) / safe
    min_z = np.full(n_cells, np.inf)
    np.minimum.at(min_z, cell, z)
    min_z[~nonempty] = 0.0

    channels = np.stack([mean_r, count, var_z, min_z]).reshape(4, H, W)
    return BevMap(spec, channels)


def save_bev(path, bev):
    s = bev.spec
    header = _BEV_HEADER.pack(BEV_MAGIC, s.origin[0], s.origin[1], s.width_px, s.height_px, s.resolution)
    Path(path).write_bytes(header + np.ascontiguousarray(bev.channels, dtype="<f4").tobytes())


def load_bev(path):
    data = Path(path).read_bytes()
    if len(data) < _BEV_HEADER.size or data[:4] != BEV_MAGIC:
        raise ParseError("not a BEV map file", offset=0)
    _, ox, oy, w, h, res = _BEV_HEADER.unpack_from(data)
    need = _BEV_HEADER.size + 4 * 4 * w * h
    if len(data) != need:
        raise ParseError(f"expected {need} bytes, got {len(data)}", offset=min(len(data), need))
    planes = np.frombuffer(data, dtype="<f4", offset=_BEV_HEADER.size).reshape(4, h, w)
    return BevMap(GridSpec((ox, oy), w, h, res), planes.astype(float))
