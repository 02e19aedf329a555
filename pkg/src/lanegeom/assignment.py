"""Set matching between predicted lane slots and padded ground-truth slots."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .curve import CurveParams, curve_fit_loss, lane_terminals
from .errors import ShapeMismatchError

EPS = 1e-7
DEFAULT_SLOTS = 15
BRUTE_FORCE_MAX = 9


@dataclass(frozen=True)
class LanePrediction:
    theta: CurveParams
    prob_lane: float

    def __post_init__(self):
        if not 0.0 <= self.prob_lane <= 1.0:
            raise ValueError(f"prob_lane {self.prob_lane} outside [0, 1]")


@dataclass
class GtSlot:
    label: int
    Q: Optional[np.ndarray] = None
    p_s: Optional[np.ndarray] = field(default=None)
    p_e: Optional[np.ndarray] = field(default=None)

    @classmethod
    def lane(cls, Q):
        Q = np.asarray(Q, dtype=float)
        p_s, p_e = lane_terminals(Q)
        return cls(1, Q, p_s, p_e)

    @classmethod
    def padding(cls):
        return cls(0)

    def require_lane(self):
        if self.label == 1 and (self.Q is None or self.p_s is None or self.p_e is None):
            raise ValueError("lane slot is missing its polyline or terminals")


def pad_slots(lanes, n_slots=DEFAULT_SLOTS):
    if len(lanes) > n_slots:
        raise ValueError(f"{len(lanes)} lanes exceed {n_slots} slots")
    return [GtSlot.lane(Q) for Q in lanes] + [GtSlot.padding() for _ in range(n_slots - len(lanes))]


def bce(prob, label):
    p = float(np.clip(prob, EPS, 1.0 - EPS))
    return -np.log(p if label == 1 else 1.0 - p)


def bce_logits(logits, labels):
    """Elementwise clipped BCE of logistic(logits) and its derivative w.r.t.
    the logits (zero where the clip is active)."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
    clipped = (prob < EPS) | (prob > 1.0 - EPS)
    p = np.clip(prob, EPS, 1.0 - EPS)
    value = -np.where(labels == 1, np.log(p), np.log1p(-p))
    grad = np.where(clipped, 0.0, prob - labels)
    return value, grad


def _terminal_l1(pred, gt):
    return float(np.abs(pred.theta.p_s - gt.p_s).sum() + np.abs(pred.theta.p_e - gt.p_e).sum())


def cost_matrix(preds, gts, lam1=1.0):
    """Rows are ground-truth slots, columns predictions."""
    if len(preds) != len(gts):
        raise ShapeMismatchError(f"{len(preds)} predictions vs {len(gts)} ground-truth slots")
    n = len(gts)
    D = np.empty((n, n))
    for i, g in enumerate(gts):
        g.require_lane()
        for j, p in enumerate(preds):
            prob = p.prob_lane if g.label == 1 else 1.0 - p.prob_lane
            D[i, j] = -lam1 * prob + (_terminal_l1(p, g) if g.label == 1 else 0.0)
    return D


def assignment_cost(D, perm):
    total = 0.0
    for i, j in enumerate(perm):
        total += D[i, j]
    return total


def _solve(a):
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns (perm, u, v) with perm[i] the column of row i and (u, v) optimal
    dual potentials (a[i, j] - u[i] - v[j] >= 0, tight on the assignment).
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=int)
    perm[p[1:] - 1] = np.arange(n)
    return perm, u[1:], v[1:]


def hungarian(D):
    """Minimum-cost permutation; among equal-cost optima the lexicographically
    smallest one is returned."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeMismatchError(f"cost matrix must be square, got {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ValueError("cost matrix has non-finite entries")
    n = len(D)
    if n == 0:
        return np.empty(0, dtype=int)
    perm, u, v = _solve(D)
    total = assignment_cost(D, perm)
    tol = 1e-9 * (1.0 + np.abs(D).max())
    reduced = D - u[:, None] - v[None, :]
    # any optimum uses only tight edges, so ties exist only where a tight edge
    # precedes the chosen column
    fixed = []
    fixed_cost = 0.0
    for i in range(n):
        taken = set(fixed)
        for j in range(perm[i]):
            if j in taken or reduced[i, j] > tol:
                continue
            rows = list(range(i + 1, n))
            cols = [c for c in range(n) if c not in taken and c != j]
            if rows:
                sub = D[np.ix_(rows, cols)]
                sub_perm, _, _ = _solve(sub)
                sub_cost = assignment_cost(sub, sub_perm)
            else:
                sub_perm, sub_cost = np.empty(0, dtype=int), 0.0
            if fixed_cost + D[i, j] + sub_cost <= total + tol:
                perm = np.array(fixed + [j] + [cols[k] for k in sub_perm], dtype=int)
                break
        fixed.append(int(perm[i]))
        fixed_cost += D[i, perm[i]]
    return perm


def brute_force_assign(D):
    """Exhaustive minimum over all permutations (first minimum in lexicographic order)."""
    D = np.asarray(D, dtype=float)
    n = len(D)
    if D.ndim != 2 or D.shape[1] != n:
        raise ShapeMismatchError(f"cost matrix must be square, got {D.shape}")
    if n > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force limited to N <= {BRUTE_FORCE_MAX}, got {n}")
    if n == 0:
        return np.empty(0, dtype=int)
    perms = np.array(list(itertools.permutations(range(n))))
    acc = np.zeros(len(perms))
    for i in range(n):
        acc = acc + D[i, perms[:, i]]
    return perms[int(np.argmin(acc))]


def global_loss(preds, gts, perm, lam1=1.0):
    """Classification plus curve-fitting loss over matched slots."""
    if len(preds) != len(gts) or len(perm) != len(gts):
        raise ShapeMismatchError("predictions, ground truth and matching differ in size")
    if sorted(int(j) for j in perm) != list(range(len(gts))):
        raise ValueError("matching is not a permutation")
    total = 0.0
    for i, g in enumerate(gts):
        g.require_lane()
        pred = preds[perm[i]]
        total += lam1 * bce(pred.prob_lane, g.label)
        if g.label == 1:
            total += curve_fit_loss(pred.theta, g.Q, terminals=(g.p_s, g.p_e))[0]
    return total
