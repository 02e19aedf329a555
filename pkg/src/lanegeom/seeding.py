"""Heuristic lane seeds from the BEV intensity channel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .curve import fit_curve
from .errors import LaneGeomError
from .polyline import total_length


@dataclass
class SeedConfig:
    intensity_threshold: float | None = None  # None: Otsu split of non-empty cells
    bridge_px: int = 3  # dilation used only to connect components across sampling gaps
    min_arc_length: float = 2.0
    bin_size: float = 0.25
    min_pixels: int = 30
    max_curves: int = 15


def _component_polyline(xy, z, bin_size):
    centre = xy.mean(axis=0)
    _, _, vt = np.linalg.svd(xy - centre, full_matrices=False)
    u = (xy - centre) @ vt[0]
    bins = np.floor((u - u.min()) / bin_size).astype(int)
    counts = np.bincount(bins)
    used = counts > 0
    px = np.bincount(bins, weights=xy[:, 0])[used] / counts[used]
    py = np.bincount(bins, weights=xy[:, 1])[used] / counts[used]
    pz = np.bincount(bins, weights=z)[used] / counts[used]
    return np.column_stack([px, py, pz])


def otsu_threshold(values, bins=256):
    """Histogram threshold maximising between-class variance."""
    values = np.asarray(values, dtype=float)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    mids = 0.5 * (edges[1:] + edges[:-1])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * mids)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(edges[np.argmax(between[:-1]) + 1])


def seed_curves(bev, cfg=None):
    """Threshold intensity, group bright cells into 8-connected components
    (after a small dilation that bridges sampling gaps) and fit one curve per
    long-enough component."""
    cfg = cfg or SeedConfig()
    nonempty = bev.density > 0
    if not nonempty.any():
        return []
    thr = cfg.intensity_threshold
    if thr is None:
        thr = otsu_threshold(bev.intensity[nonempty])
    mask = nonempty & (bev.intensity >= thr) & (bev.intensity > 0)
    eight = np.ones((3, 3), dtype=bool)
    grown = ndimage.binary_dilation(mask, eight, iterations=cfg.bridge_px) if cfg.bridge_px else mask
    labels, n = ndimage.label(grown, structure=eight)
    if n == 0:
        return []
    labels[~mask] = 0
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    curves = []
    for lab in np.argsort(-sizes[1:], kind="stable") + 1:
        if sizes[lab] < cfg.min_pixels or len(curves) >= cfg.max_curves:
            break
        rows, cols = np.nonzero(labels == lab)
        xy = bev.spec.cell_centers(rows, cols)
        poly = _component_polyline(xy, bev.height_min[rows, cols], cfg.bin_size)
        if len(poly) < 4 or total_length(poly) < cfg.min_arc_length:
            continue
        try:
            curves.append(fit_curve(poly).theta)
        except LaneGeomError:
            continue
    return curves
