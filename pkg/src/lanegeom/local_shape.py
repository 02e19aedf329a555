"""Local segment bars, their Gaussians, and the local shape losses.

Batched routines work on segment arrays with columns (x, y, z, l, alpha).
Heading is undirected, so covariances are pi-periodic in alpha.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeMismatchError
from .polyline import wrap_heading

DEFAULT_WIDTH = 0.30
DEFAULT_WEIGHTS = (1.0, 1.0, 0.5)  # lambda1 (cls), lambda2 (kl), lambda3 (smooth)


@dataclass(frozen=True)
class SegmentParams:
    p_o: tuple
    l: float
    alpha: float  # from the +y axis: the bar runs along (-sin a, cos a)

    def __post_init__(self):
        p = tuple(float(v) for v in self.p_o)
        if len(p) != 3:
            raise ValueError("p_o must be a 3D point")
        object.__setattr__(self, "p_o", p)
        if not self.l > 0:
            raise ValueError(f"segment length must be positive, got {self.l}")
        if not (-np.pi / 2 < self.alpha <= np.pi / 2):
            raise ValueError(f"alpha {self.alpha} outside (-pi/2, pi/2]")

    @classmethod
    def from_array(cls, row):
        return cls(p_o=tuple(row[:3]), l=float(row[3]), alpha=float(wrap_heading(row[4])))

    def to_array(self):
        return np.array([*self.p_o, self.l, self.alpha])

    def to_dict(self):
        return {"p_o": list(self.p_o), "l": self.l, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d):
        return cls(p_o=tuple(d["p_o"]), l=d["l"], alpha=d["alpha"])


@dataclass(frozen=True)
class Gauss2:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(2))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float).reshape(2, 2))


def _check_spd(S):
    S = np.asarray(S, dtype=float)
    sym = np.abs(S[..., 0, 1] - S[..., 1, 0]) <= 1e-12 * (1 + np.abs(S[..., 0, 1]))
    det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
    if not (np.all(sym) and np.all(det > 0) and np.all(S[..., 0, 0] > 0)):
        raise ValueError("covariance is not symmetric positive definite")


def _inv2(S):
    det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
    inv = np.empty_like(S)
    inv[..., 0, 0] = S[..., 1, 1]
    inv[..., 1, 1] = S[..., 0, 0]
    inv[..., 0, 1] = -S[..., 0, 1]
    inv[..., 1, 0] = -S[..., 1, 0]
    return inv / det[..., None, None], det


def bar_covariance(l, alpha, w):
    """Covariance R diag(w^2, l^2/4) R^T and its derivatives w.r.t. l and alpha."""
    l = np.asarray(l, dtype=float)
    c, s = np.cos(alpha), np.sin(alpha)
    a = w * w
    b = l * l / 4.0
    cs = c * s
    S = np.empty(l.shape + (2, 2))
    S[..., 0, 0] = a * c * c + b * s * s
    S[..., 1, 1] = a * s * s + b * c * c
    S[..., 0, 1] = S[..., 1, 0] = (a - b) * cs
    dS_dl = np.empty_like(S)
    dS_dl[..., 0, 0] = s * s
    dS_dl[..., 1, 1] = c * c
    dS_dl[..., 0, 1] = dS_dl[..., 1, 0] = -cs
    dS_dl *= (l / 2.0)[..., None, None]
    dS_da = np.empty_like(S)
    dS_da[..., 0, 0] = 2 * (b - a) * cs
    dS_da[..., 1, 1] = 2 * (a - b) * cs
    dS_da[..., 0, 1] = dS_da[..., 1, 0] = (a - b) * (c * c - s * s)
    return S, dS_dl, dS_da


def segment_gaussian(eta, w=DEFAULT_WIDTH):
    if not w > 0:
        raise ValueError("bar width must be positive")
    S, _, _ = bar_covariance(eta.l, eta.alpha, w)
    return Gauss2(mu=np.array(eta.p_o[:2]), sigma=S)


class KLGrad(NamedTuple):
    mu1: np.ndarray
    sigma1: np.ndarray
    mu2: np.ndarray
    sigma2: np.ndarray


def _kl_batch(mu1, S1, mu2, S2):
    S1inv, det1 = _inv2(S1)
    S2inv, det2 = _inv2(S2)
    d = mu2 - mu1
    S2d = np.einsum("...ij,...j->...i", S2inv, d)
    tr = np.einsum("...ij,...ji->...", S2inv, S1)
    kl = 0.5 * (tr + np.einsum("...i,...i->...", d, S2d) - 2.0 + np.log(det2) - np.log(det1))
    g_mu1 = -S2d
    g_mu2 = S2d
    g_S1 = 0.5 * (S2inv - S1inv)
    g_S2 = 0.5 * (-S2inv @ S1 @ S2inv - S2d[..., :, None] * S2d[..., None, :] + S2inv)
    return kl, g_mu1, g_S1, g_mu2, g_S2


def kl_gauss2(g1, g2):
    """KL(g1 || g2) for 2D Gaussians, with gradients w.r.t. both mean and
    covariance entries (covariance entries treated as independent)."""
    _check_spd(g1.sigma)
    _check_spd(g2.sigma)
    kl, gm1, gS1, gm2, gS2 = _kl_batch(g1.mu, g1.sigma, g2.mu, g2.sigma)
    return max(float(kl), 0.0), KLGrad(gm1, gS1, gm2, gS2)


def symmetric_kl_batch(pred, gt, w=DEFAULT_WIDTH):
    """Half the symmetric KL between predicted and ground-truth bars, summed.

    ``pred`` and ``gt`` are (M, 5) segment arrays. Returns the value and its
    gradient w.r.t. ``pred`` (the z column gets no gradient).
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    grad = np.zeros_like(pred)
    if len(pred) == 0:
        return 0.0, grad
    Sp, dSp_dl, dSp_da = bar_covariance(pred[:, 3], pred[:, 4], w)
    Sg, _, _ = bar_covariance(gt[:, 3], gt[:, 4], w)
    mp, mg = pred[:, :2], gt[:, :2]
    kl_gp, _, _, gm_p2, gS_p2 = _kl_batch(mg, Sg, mp, Sp)
    kl_pg, gm_p1, gS_p1, _, _ = _kl_batch(mp, Sp, mg, Sg)
    value = 0.5 * float(np.sum(kl_gp + kl_pg))
    gS = 0.5 * (gS_p2 + gS_p1)
    grad[:, :2] = 0.5 * (gm_p2 + gm_p1)
    grad[:, 3] = np.einsum("mij,mij->m", gS, dSp_dl)
    grad[:, 4] = np.einsum("mij,mij->m", gS, dSp_da)
    return value, grad


def _flatten_segments(segs):
    rows = []
    shape = []
    for lane in segs:
        if isinstance(lane, SegmentParams):
            rows.append(lane.to_array())
            shape.append(None)
        else:
            lane = list(lane)
            rows.extend(s.to_array() for s in lane)
            shape.append(len(lane))
    return np.array(rows).reshape(-1, 5), shape


def local_kl_loss(preds, gts, w=DEFAULT_WIDTH):
    """Half the symmetric KL summed over aligned (lane, cell) pairs.

    Accepts flat lists of SegmentParams or per-lane nested lists.
    """
    p, p_shape = _flatten_segments(preds)
    g, g_shape = _flatten_segments(gts)
    if p_shape != g_shape:
        raise ShapeMismatchError("predictions and ground truth are not aligned by lane/cell")
    value, _ = symmetric_kl_batch(p, g, w)
    return value


def smoothness_loss(lanes):
    """Sum over lanes of second-difference norms of consecutive output points.

    Returns the value and one gradient array per lane. Lanes with fewer than
    three points contribute nothing.
    """
    total = 0.0
    grads = []
    for pts in lanes:
        pts = np.asarray(pts, dtype=float)
        g = np.zeros_like(pts)
        if len(pts) >= 3:
            dd = pts[2:] - 2 * pts[1:-1] + pts[:-2]
            n = np.linalg.norm(dd, axis=1)
            total += float(n.sum())
            u = np.divide(dd, n[:, None], out=np.zeros_like(dd), where=n[:, None] > 0)
            g[2:] += u
            g[1:-1] -= 2 * u
            g[:-2] += u
        grads.append(g)
    return total, grads


def height_loss(pred_z, gt_z):
    pred_z = np.asarray(pred_z, dtype=float)
    gt_z = np.asarray(gt_z, dtype=float)
    if pred_z.shape != gt_z.shape:
        raise ShapeMismatchError(f"{pred_z.shape} vs {gt_z.shape}")
    if pred_z.size == 0:
        raise ValueError("height_loss needs at least one cell")
    diff = pred_z - gt_z
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def local_total_loss(kl, sm, cls, z, lam1=DEFAULT_WEIGHTS[0], lam2=DEFAULT_WEIGHTS[1],
                     lam3=DEFAULT_WEIGHTS[2]):
    return lam2 * kl + lam3 * sm + lam1 * cls + z
