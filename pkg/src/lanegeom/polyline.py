"""Arc-length helpers for 3D polylines stored as (n, 3) float arrays."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError


def as_polyline(points, dedupe=False):
    """Validate and return a float (n, 3) polyline.

    Consecutive duplicates raise unless ``dedupe`` is set, in which case they
    are dropped.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"polyline must have shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("polyline has non-finite coordinates")
    if len(pts) > 1:
        same = np.all(pts[1:] == pts[:-1], axis=1)
        if same.any():
            if not dedupe:
                raise DegenerateGeometryError("polyline has repeated consecutive points")
            pts = pts[np.concatenate([[True], ~same])]
    if len(pts) < 2:
        raise DegenerateGeometryError("polyline needs at least 2 distinct points")
    return pts


def cumulative_length(pts, planar=False):
    seg = np.diff(pts[:, :2] if planar else pts, axis=0)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])


def total_length(pts):
    return float(cumulative_length(pts)[-1])


def interpolate_at(pts, s, cum=None):
    """Points at arc positions ``s`` (clamped to the polyline)."""
    if cum is None:
        cum = cumulative_length(pts)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 2)
    seg_len = cum[idx + 1] - cum[idx]
    frac = np.where(seg_len > 0, (s - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    return pts[idx] + frac[..., None] * (pts[idx + 1] - pts[idx])


def arc_positions(length, spacing):
    """0, spacing, 2*spacing, ... plus ``length`` itself, without near-duplicates."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    n = int(np.floor(length / spacing))
    s = spacing * np.arange(n + 1)
    s = s[s < length - 1e-9 * max(1.0, length)]
    return np.append(s, length)


def densify_polyline(pts, spacing):
    pts = as_polyline(pts, dedupe=True)
    cum = cumulative_length(pts)
    if cum[-1] <= 0:
        raise DegenerateGeometryError("zero-length polyline")
    s = arc_positions(cum[-1], spacing)
    out = interpolate_at(pts, s, cum)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def point_to_polyline_distance(points, pts, planar=False):
    """Minimum Euclidean distance from each query point to the polyline."""
    q = np.atleast_2d(np.asarray(points, dtype=float))
    p = np.asarray(pts, dtype=float)
    if planar:
        q, p = q[:, :2], p[:, :2]
    a = p[:-1]
    ab = p[1:] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    # (n_query, n_seg)
    aq = q[:, None, :] - a[None, :, :]
    t = np.einsum("qsd,sd->qs", aq, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(q[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def bar_heading(dx, dy):
    """Bar angle of direction (dx, dy): measured from the +y axis, so the
    direction is (-sin a, cos a), wrapped to (-pi/2, pi/2]."""
    return wrap_heading(np.arctan2(-np.asarray(dx, dtype=float), np.asarray(dy, dtype=float)))


def wrap_heading(alpha):
    """Map an undirected heading to (-pi/2, pi/2]."""
    a = np.mod(np.asarray(alpha, dtype=float) + np.pi / 2, np.pi) - np.pi / 2
    a = np.where(a <= -np.pi / 2, a + np.pi, a)
    return a if a.ndim else float(a)
