"""Dynamic anchor cells sampled along lanes, and ground-truth segment extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .curve import ArcLengthTable, CurveParams, curvature, sample_uniform
from .errors import PlacementError
from .local_shape import SegmentParams
from .polyline import as_polyline, cumulative_length, interpolate_at, point_to_polyline_distance, bar_heading

DEFAULT_B = 40
DEFAULT_CELL = 1.0  # 32 px at 0.03125 m/px
DEFAULT_NEG_RATIO = 1.0
DEFAULT_GAIN = 5.0


@dataclass(frozen=True)
class AnchorCell:
    center: tuple
    half_size: float
    lane_id: int
    order_index: int
    label: str = "pos"

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not self.half_size > 0:
            raise ValueError("half_size must be positive")
        if self.label not in ("pos", "neg"):
            raise ValueError(f"label must be 'pos' or 'neg', got {self.label!r}")

    @property
    def positive(self):
        return self.label == "pos"

    def to_dict(self):
        return {"center": list(self.center), "half_size": self.half_size,
                "lane_id": self.lane_id, "order": self.order_index, "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), d["half_size"], d["lane_id"], d["order"], d["label"])


def _as_dense_polyline(lane, samples=200):
    if isinstance(lane, CurveParams):
        return sample_uniform(lane, samples)
    return as_polyline(lane, dedupe=True)


def _equal_arc_points(lane, B):
    if isinstance(lane, CurveParams):
        table = ArcLengthTable(lane)
        return lane(table.t_of_s(np.linspace(0.0, table.length, B)))
    pts = as_polyline(lane, dedupe=True)
    cum = cumulative_length(pts)
    return interpolate_at(pts, np.linspace(0.0, cum[-1], B), cum)


def sample_training_anchors(gt, rng, B=DEFAULT_B, r_m=DEFAULT_CELL, jitter=None,
                            neg_ratio=DEFAULT_NEG_RATIO, lanes=None, lane_id=0):
    """B jittered positive cells at equal arc spacing plus negative cells.

    Negatives are drawn uniformly (by area) from the annulus [r_m, 3 r_m]
    around random positives and rejected when closer than r_m to any lane in
    ``lanes`` (defaults to ``gt`` alone).
    """
    if B < 3:
        raise ValueError("B must be at least 3")
    if not r_m > 0:
        raise ValueError("cell size must be positive")
    if jitter is None:
        jitter = r_m / 4
    half = r_m / 2
    centres = _equal_arc_points(gt, B)[:, :2]
    if jitter > 0:
        centres = centres + rng.uniform(-jitter, jitter, size=centres.shape)
    cells = [AnchorCell(c, half, lane_id, k, "pos") for k, c in enumerate(centres)]

    n_neg = math.ceil(neg_ratio * B)
    if n_neg == 0:
        return cells
    blockers = [_as_dense_polyline(l) for l in (lanes if lanes is not None else [gt])]
    accepted = []
    attempts = 0
    budget = 100 * n_neg
    while len(accepted) < n_neg:
        if attempts >= budget:
            raise PlacementError(f"placed {len(accepted)}/{n_neg} negative cells in {budget} attempts")
        batch = min(budget - attempts, 2 * (n_neg - len(accepted)) + 8)
        attempts += batch
        base = centres[rng.integers(0, B, size=batch)]
        ang = rng.uniform(0.0, 2 * np.pi, size=batch)
        rad = np.sqrt(rng.uniform(r_m**2, (3 * r_m) ** 2, size=batch))
        cand = base + rad[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        cand3 = np.column_stack([cand, np.zeros(batch)])
        ok = np.ones(batch, dtype=bool)
        for pl in blockers:
            ok &= point_to_polyline_distance(cand3, pl, planar=True) >= r_m
        for c in cand[ok][: n_neg - len(accepted)]:
            accepted.append(c)
    cells.extend(AnchorCell(c, half, lane_id, k, "neg") for k, c in enumerate(accepted))
    return cells


def sample_inference_anchors(theta, B=DEFAULT_B, r_m=DEFAULT_CELL, gain=DEFAULT_GAIN,
                             lane_id=0, grid=1025):
    """B cells whose arc-length density is proportional to 1 + gain*|curvature|."""
    if B < 3:
        raise ValueError("B must be at least 3")
    table = ArcLengthTable(theta)
    s_grid = np.linspace(0.0, table.length, grid)
    t_grid = table.t_of_s(s_grid)
    density = 1.0 + gain * np.abs(curvature(theta, t_grid))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(s_grid))])
    cdf /= cdf[-1]
    s = np.interp(np.linspace(0.0, 1.0, B), cdf, s_grid)
    centres = theta(table.t_of_s(s))[:, :2]
    return [AnchorCell(c, r_m / 2, lane_id, k, "pos") for k, c in enumerate(centres)]


def _clip_intervals(a, b, lo, hi):
    """Liang-Barsky clip of 2D segments a[k]->b[k] against the box [lo, hi].

    Returns (t0, t1, hit) arrays; ``hit`` marks segments that touch the box.
    """
    d = b - a
    t0 = np.zeros(len(a))
    t1 = np.ones(len(a))
    hit = np.ones(len(a), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(2):
            for p, q in ((-d[:, k], a[:, k] - lo[k]), (d[:, k], hi[k] - a[:, k])):
                flat = p == 0
                hit &= ~(flat & (q < 0))
                t = np.where(flat, 0.0, q / np.where(flat, 1.0, p))
                t0 = np.where(~flat & (p < 0), np.maximum(t0, t), t0)
                t1 = np.where(~flat & (p > 0), np.minimum(t1, t), t1)
    return t0, t1, hit & (t0 <= t1)


def _clipped_pieces(pts, lo, hi):
    a, b = pts[:-1], pts[1:]
    t0, t1, hit = _clip_intervals(a[:, :2], b[:, :2], lo, hi)
    pieces = []
    current = None
    prev = -2
    for k in np.nonzero(hit)[0]:
        p0 = a[k] + t0[k] * (b[k] - a[k])
        p1 = a[k] + t1[k] * (b[k] - a[k])
        if current is not None and prev == k - 1 and t0[k] == 0.0:
            current.append(p1)
        else:
            current = [p0, p1]
            pieces.append(current)
        if t1[k] < 1.0:
            current = None
        prev = k
    return [np.array(p) for p in pieces]


def extract_gt_segment(lane, cell):
    """Ground-truth bar of ``lane`` inside ``cell``, or None if it misses the cell.

    Among several disjoint clipped pieces, the one whose midpoint is nearest
    the cell centre wins.
    """
    pts = as_polyline(lane, dedupe=True)
    c = np.asarray(cell.center)
    lo, hi = c - cell.half_size, c + cell.half_size
    best = None
    for piece in _clipped_pieces(pts, lo, hi):
        cum = cumulative_length(piece, planar=True)
        if cum[-1] <= 0:
            continue
        mid = interpolate_at(piece, cum[-1] / 2, cum)
        dist = float(np.hypot(*(mid[:2] - c)))
        if best is None or dist < best[0]:
            chord = piece[-1, :2] - piece[0, :2]
            alpha = float(bar_heading(chord[0], chord[1]))
            best = (dist, SegmentParams(tuple(mid), float(cum[-1]), alpha))
    return None if best is None else best[1]


def nearest_gt_segment(lanes, cell):
    """(lane index, segment) of the lane piece closest to the cell centre."""
    c = np.asarray(cell.center)
    best = None
    for i, lane in enumerate(lanes):
        seg = extract_gt_segment(lane, cell)
        if seg is None:
            continue
        d = float(np.hypot(seg.p_o[0] - c[0], seg.p_o[1] - c[1]))
        if best is None or d < best[0]:
            best = (d, i, seg)
    return None if best is None else (best[1], best[2])
