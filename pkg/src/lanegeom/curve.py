"""Global lane model: a cubic in a parameter t measured along the lane's own
chord (lower terminal -> upper terminal), plus the fixed-y-axis baseline.

The boundary conditions f(0) = p_s and f(1) = p_e are enforced by
elimination: only A, B and the two terminals are free,

    D = p_s,  C = p_e - p_s - A - B,

so f(t) = A(t^3 - t) + B(t^2 - t) + p_s(1 - t) + p_e t, which is linear in
the 12 free parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .errors import DegenerateGeometryError, RankDeficientError
from .polyline import arc_positions

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class CurveParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    p_s: np.ndarray
    p_e: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "p_s", "p_e"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if not np.array_equal(self.D, self.p_s):
            raise ValueError("boundary condition violated: D must equal p_s")
        if np.any(np.abs(self.A + self.B + self.C + self.D - self.p_e) > BOUNDARY_TOL):
            raise ValueError("boundary condition violated: A + B + C + D must equal p_e")
        if not np.linalg.norm(self.p_e - self.p_s) > 0:
            raise DegenerateGeometryError("terminals coincide")

    @classmethod
    def from_free(cls, A, B, p_s, p_e):
        A, B, p_s, p_e = (np.asarray(v, dtype=float).reshape(3) for v in (A, B, p_s, p_e))
        return cls(A=A, B=B, C=p_e - p_s - A - B, D=p_s.copy(), p_s=p_s, p_e=p_e)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float).reshape(12)
        return cls.from_free(v[0:3], v[3:6], v[6:9], v[9:12])

    def free_vector(self):
        """(A, B, p_s, p_e) flattened; the parameterization the optimizer uses."""
        return np.concatenate([self.A, self.B, self.p_s, self.p_e])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return ((self.A * t + self.B) * t + self.C) * t + self.D

    def derivative(self, t, order=1):
        t = np.asarray(t, dtype=float)[..., None]
        if order == 1:
            return (3 * self.A * t + 2 * self.B) * t + self.C
        if order == 2:
            return 6 * self.A * t + 2 * self.B
        raise ValueError("order must be 1 or 2")

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("A", "B", "C", "D", "p_s", "p_e")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("A", "B", "C", "D", "p_s", "p_e")})


class CurveEval(NamedTuple):
    point: np.ndarray
    extrapolated: bool


def eval_curve(theta, t):
    t_arr = np.asarray(t, dtype=float)
    out_of_range = bool(np.any((t_arr < 0) | (t_arr > 1)))
    return CurveEval(theta(t_arr), out_of_range)


def project_to_axis(p_s, p_e, p):
    """Relative position of ``p`` along the chord p_s -> p_e (not clamped)."""
    p_s = np.asarray(p_s, dtype=float)
    axis = np.asarray(p_e, dtype=float) - p_s
    denom = float(axis @ axis)
    if denom == 0:
        raise DegenerateGeometryError("coincident terminals: projection axis undefined")
    return (np.asarray(p, dtype=float) - p_s) @ axis / denom


def lane_terminals(Q):
    """(lower, upper) endpoints: lower has smaller y, ties broken by smaller x."""
    Q = np.asarray(Q, dtype=float)
    a, b = Q[0], Q[-1]
    if (a[1], a[0]) <= (b[1], b[0]):
        return a.copy(), b.copy()
    return b.copy(), a.copy()


def orient_lane(Q):
    """Return Q ordered from its lower terminal to its upper one."""
    Q = np.asarray(Q, dtype=float)
    p_s, _ = lane_terminals(Q)
    return Q if np.array_equal(Q[0], p_s) else Q[::-1].copy()


def free_basis(t):
    """Per-sample weights of (A, B, p_s, p_e) in f(t); shape (..., 4)."""
    t = np.asarray(t, dtype=float)
    return np.stack([t**3 - t, t**2 - t, 1.0 - t, t], axis=-1)


def _prepare_targets(Q, terminals=None):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != 3:
        raise ValueError(f"Q must have shape (n, 3), got {Q.shape}")
    if len(Q) == 0:
        raise ValueError("curve_fit_loss needs at least one ground-truth point")
    p_s, p_e = terminals if terminals is not None else lane_terminals(Q)
    return Q, project_to_axis(p_s, p_e, Q)


def fit_loss_from_free(free, t, Q, basis=None):
    """Mean point distance and its gradient w.r.t. the 12 free parameters.

    At an exactly zero residual the norm contributes a zero subgradient.
    ``basis`` may carry a precomputed ``free_basis(t)``.
    """
    P = np.asarray(free, dtype=float).reshape(4, 3)
    w = free_basis(t) if basis is None else basis
    r = w @ P - Q
    dist = np.sqrt(np.einsum("ij,ij->i", r, r))
    unit = np.divide(r, dist[:, None], out=np.zeros_like(r), where=dist[:, None] > 0)
    n = len(Q)
    grad = (w.T @ unit) / n
    return float(dist.sum() / n), grad.reshape(12)


def curve_fit_loss(theta, Q, terminals=None):
    """Mean distance between the curve at the projected positions and Q.

    Positions come from projecting Q onto the chord between the ground-truth
    terminals (those of Q itself unless ``terminals`` is given). The gradient
    is w.r.t. ``theta.free_vector()``.
    """
    Q, t = _prepare_targets(Q, terminals)
    return fit_loss_from_free(theta.free_vector(), t, Q)


class CurveFit(NamedTuple):
    theta: CurveParams
    residual: float


def fit_curve(Q):
    """Constrained least-squares cubic over the lane's own chord.

    Terminals are Q's endpoints (lower first). Raises RankDeficientError when
    the interior projections cannot determine both free coefficients.
    """
    Q = orient_lane(np.asarray(Q, dtype=float))
    if Q.ndim != 2 or Q.shape[1] != 3 or len(Q) < 2:
        raise ValueError("fit_curve needs an (n >= 2, 3) point array")
    p_s, p_e = Q[0].copy(), Q[-1].copy()
    t = project_to_axis(p_s, p_e, Q)
    M = free_basis(t)[:, :2]
    rhs = Q - np.outer(1.0 - t, p_s) - np.outer(t, p_e)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] <= 1e-12:
        # every sample sits on a terminal: only the straight line is determined
        A = B = np.zeros(3)
    else:
        if sv[-1] <= 1e-10 * sv[0]:
            raise RankDeficientError("interior projections are degenerate; cannot fit cubic")
        AB, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        A, B = AB
    theta = CurveParams.from_free(A, B, p_s, p_e)
    residual, _ = curve_fit_loss(theta, Q, terminals=(p_s, p_e))
    return CurveFit(theta, residual)


@dataclass(frozen=True)
class FixedAxisCurve:
    """x(y) and z(y) cubics, coefficients highest power first."""

    x_coeffs: tuple
    z_coeffs: tuple
    y_min: float
    y_max: float

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return np.stack([np.polyval(self.x_coeffs, y), y, np.polyval(self.z_coeffs, y)], axis=-1)


class FixedAxisFit(NamedTuple):
    curve: FixedAxisCurve
    residual: float
    ill_conditioned: bool


def fit_fixed_axis(Q, cond_limit=1e10):
    """Unconstrained least-squares cubics x(y), z(y).

    ``ill_conditioned`` is set when y barely varies over Q (the lane runs
    across the y-axis); the coefficients are then the minimum-norm solution.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != 3 or len(Q) < 4:
        raise ValueError("fit_fixed_axis needs an (n >= 4, 3) point array")
    y = Q[:, 1]
    V = np.vander(y, 4)
    spread = np.ptp(y)
    extent = max(1.0, float(np.abs(Q).max()))
    if spread <= 1e-9 * extent:
        ill = True
    else:
        yn = (y - y.mean()) / spread
        ill = bool(np.linalg.cond(np.vander(yn, 4)) > cond_limit)
    coef, *_ = np.linalg.lstsq(V, Q[:, [0, 2]], rcond=None)
    curve = FixedAxisCurve(
        x_coeffs=tuple(coef[:, 0]), z_coeffs=tuple(coef[:, 1]),
        y_min=float(y.min()), y_max=float(y.max()),
    )
    pred = curve(y)
    residual = float(np.mean(np.linalg.norm(pred - Q, axis=1)))
    return FixedAxisFit(curve, residual, ill)


def curvature(theta, t):
    """Planar (x, y) curvature of the curve at t, in 1/m."""
    d1 = theta.derivative(t, 1)
    d2 = theta.derivative(t, 2)
    speed = np.hypot(d1[..., 0], d1[..., 1])
    scale = max(1.0, float(np.linalg.norm(theta.p_e - theta.p_s)))
    if np.any(speed <= 1e-12 * scale):
        raise DegenerateGeometryError("cusp: planar tangent vanishes")
    cross = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
    k = np.abs(cross) / speed**3
    return k if np.ndim(k) else float(k)


def _speed(theta, t):
    return np.linalg.norm(theta.derivative(t, 1), axis=-1)


def arc_length(theta, t0=0.0, t1=1.0, tol=1e-6):
    value, _ = integrate.quad(lambda t: float(_speed(theta, t)), t0, t1,
                              epsabs=tol * 1e-3, epsrel=1e-12, limit=200)
    return value


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class ArcLengthTable:
    """Piecewise Gauss-Legendre arc length of a curve over [0, 1] with an
    inverse map s -> t (Newton, safeguarded by bisection)."""

    def __init__(self, theta, panels=64):
        self.theta = theta
        self.edges = np.linspace(0.0, 1.0, panels + 1)
        pieces = self._integrate(self.edges[:-1], self.edges[1:])
        self.cum = np.concatenate([[0.0], np.cumsum(pieces)])
        self.length = float(self.cum[-1])

    def _integrate(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        half = 0.5 * (b - a)
        nodes = 0.5 * (a + b)[..., None] + half[..., None] * _GL_X
        return half * (_speed(self.theta, nodes) @ _GL_W)

    def s_of_t(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        k = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.edges) - 2)
        return self.cum[k] + self._integrate(self.edges[k], t)

    def t_of_s(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        k = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.edges) - 2)
        lo, hi = self.edges[k].copy(), self.edges[k + 1].copy()
        span = self.cum[k + 1] - self.cum[k]
        frac = np.divide(s - self.cum[k], span, out=np.zeros_like(s), where=span > 0)
        t = lo + frac * (hi - lo)
        for _ in range(30):
            err = self.s_of_t(t) - s
            lo = np.where(err < 0, t, lo)
            hi = np.where(err > 0, t, hi)
            sp = _speed(self.theta, t)
            step = np.divide(err, sp, out=np.zeros_like(err), where=sp > 0)
            t_new = t - step
            bad = (t_new <= lo) | (t_new >= hi) | (sp <= 0)
            t_new = np.where(bad, 0.5 * (lo + hi), t_new)
            if np.all(np.abs(t_new - t) < 1e-15):
                t = t_new
                break
            t = t_new
        t = np.where(s <= 0, 0.0, np.where(s >= self.length, 1.0, t))
        return t


def sample_uniform(theta, n):
    """n points equally spaced in arc length, both terminals included."""
    if n < 2:
        raise ValueError("n must be at least 2")
    table = ArcLengthTable(theta)
    t = table.t_of_s(np.linspace(0.0, table.length, n))
    return theta(t)


def densify_curve(theta, spacing):
    table = ArcLengthTable(theta)
    return theta(table.t_of_s(arc_positions(table.length, spacing)))
