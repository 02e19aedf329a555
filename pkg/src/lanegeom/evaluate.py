"""Dense-sampling precision / recall / F1 for 3D lane polylines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curve import CurveParams, densify_curve
from .polyline import densify_polyline

DEFAULT_THRESHOLDS = (0.10, 0.30)
DEFAULT_SPACING = 0.05


def densify(line, spacing=DEFAULT_SPACING):
    """Points at every multiple of ``spacing`` along the line, both ends included."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if isinstance(line, CurveParams):
        return densify_curve(line, spacing)
    return densify_polyline(line, spacing)


class GridIndex:
    """Uniform spatial hash over 3D points with cubic cells of side ``cell``."""

    def __init__(self, points, cell):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.cell = float(cell)
        ijk = np.floor(self.points / self.cell).astype(np.int64)
        self._keys, order = self._encode(ijk)
        self._sorted = order
        self.ukeys, self.start, counts = np.unique(self._keys[order], return_index=True,
                                                  return_counts=True)
        self.end = self.start + counts

    @staticmethod
    def _encode(ijk):
        # 21 bits per axis, offset so negative cells stay distinct
        off = ijk + (1 << 20)
        keys = (off[:, 0] << 42) | (off[:, 1] << 21) | off[:, 2]
        return keys, np.argsort(keys, kind="stable")

    def has_neighbor(self, queries, radius):
        """True where some indexed point lies within ``radius`` (inclusive)."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        hit = np.zeros(len(q), dtype=bool)
        if len(q) == 0 or len(self.points) == 0:
            return hit
        if radius > self.cell:
            raise ValueError("query radius exceeds the grid cell size")
        qijk = np.floor(q / self.cell).astype(np.int64)
        ref = self.points[self._sorted]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    keys, _ = self._encode(qijk + np.array([dx, dy, dz]))
                    pos = np.clip(np.searchsorted(self.ukeys, keys), 0, len(self.ukeys) - 1)
                    found = (self.ukeys[pos] == keys) & ~hit
                    if not found.any():
                        continue
                    qi = np.nonzero(found)[0]
                    s, e = self.start[pos[qi]], self.end[pos[qi]]
                    counts = e - s
                    q_rep = np.repeat(qi, counts)
                    first = np.repeat(s - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
                    r_idx = first + np.arange(counts.sum())
                    d = np.sqrt(((q[q_rep] - ref[r_idx]) ** 2).sum(axis=1))
                    close = q_rep[d <= radius]
                    hit[close] = True
        return hit


@dataclass
class ThresholdResult:
    threshold: float
    precision: float
    recall: float
    f1: float
    pred_matched: int
    pred_total: int
    gt_matched: int
    gt_total: int


@dataclass
class EvalReport:
    results: dict = field(default_factory=dict)  # threshold -> ThresholdResult

    def __getitem__(self, tau):
        return self.results[tau]

    def f1(self, tau):
        return self.results[tau].f1

    def to_dict(self):
        return {"thresholds": [vars(r) for r in self.results.values()]}

    @classmethod
    def from_dict(cls, d):
        rep = cls()
        for r in d["thresholds"]:
            rep.results[r["threshold"]] = ThresholdResult(**r)
        return rep

    def to_table(self):
        head = f"{'Threshold':>10} | {'Precision(%)':>12} | {'Recall(%)':>9} | {'F1(%)':>6}"
        lines = [head, "-" * len(head)]
        for tau, r in self.results.items():
            lines.append(f"{tau * 100:>8.0f}cm | {r.precision * 100:>12.2f} | "
                         f"{r.recall * 100:>9.2f} | {r.f1 * 100:>6.2f}")
        return "\n".join(lines) + "\n"


def _rate(matched, total):
    return matched / total if total else 0.0


def evaluate(pred_lanes, gt_lanes, thresholds=DEFAULT_THRESHOLDS, spacing=DEFAULT_SPACING):
    """Pointwise matching within each distance threshold; lane identity is ignored.

    With no lanes on either side every rate is 1; with one side empty every
    rate is 0.
    """
    if not spacing > 0 or any(not t > 0 for t in thresholds):
        raise ValueError("spacing and thresholds must be positive")
    pred = [densify(l, spacing) for l in pred_lanes]
    gt = [densify(l, spacing) for l in gt_lanes]
    P = np.concatenate(pred) if pred else np.empty((0, 3))
    G = np.concatenate(gt) if gt else np.empty((0, 3))
    report = EvalReport()
    for tau in thresholds:
        if len(P) == 0 and len(G) == 0:
            report.results[tau] = ThresholdResult(tau, 1.0, 1.0, 1.0, 0, 0, 0, 0)
            continue
        pm = int(GridIndex(G, tau).has_neighbor(P, tau).sum()) if len(G) else 0
        gm = int(GridIndex(P, tau).has_neighbor(G, tau).sum()) if len(P) else 0
        prec = _rate(pm, len(P))
        rec = _rate(gm, len(G))
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        report.results[tau] = ThresholdResult(tau, prec, rec, f1, pm, len(P), gm, len(G))
    return report
