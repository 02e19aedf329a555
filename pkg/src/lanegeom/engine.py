"""Direct optimization of lane slots and local segments against the combined
global + local shape-matching objective.

The free variables are, per slot, the curve's (A, B, p_s, p_e) and a
classification logit; per positive anchor cell, a segment (x, y, z, l, alpha);
per anchor cell (positive or negative), a logit. The discrete matching is held
constant while differentiating and re-solved between steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .anchors import DEFAULT_B, DEFAULT_CELL, nearest_gt_segment, sample_training_anchors
from .assignment import DEFAULT_SLOTS, EPS, bce_logits, hungarian, pad_slots
from .curve import CurveParams, fit_loss_from_free, free_basis, project_to_axis, sample_uniform
from .errors import DivergenceError, NonFiniteLossError, ShapeMismatchError
from .local_shape import DEFAULT_WIDTH, smoothness_loss, symmetric_kl_batch
from .polyline import bar_heading, wrap_heading

log = logging.getLogger(__name__)

MIN_SEGMENT_LENGTH = 1e-3


@dataclass
class FitConfig:
    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 0.5
    lr: float = 0.01
    lr_final: float = 1e-4
    iters: int = 2000
    warmup_iters: int = 50
    rematch_every: int = 10
    tol: float = 1e-9
    patience: int = 50
    loss_floor: float = 1e-7  # on top of the clipped-BCE minimum
    step_tol: float = 1e-2
    max_backtracks: int = 6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    width: float = DEFAULT_WIDTH
    n_slots: int = DEFAULT_SLOTS
    cells_per_lane: int = DEFAULT_B
    cell_size: float = DEFAULT_CELL
    jitter: float = DEFAULT_CELL / 4
    neg_ratio: float = 1.0
    prob_threshold: float = 0.5
    diverge_limit: float = 1e6
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            setattr(self, f.name, type(f.default)(v))
        for name in ("lr", "iters", "rematch_every", "width", "n_slots", "cell_size", "cells_per_lane"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lam1", "lam2", "lam3", "warmup_iters", "jitter", "neg_ratio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def save(self, path):
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in asdict(self).items()))

    @classmethod
    def load(cls, path):
        from .config import read_kv

        return cls(**read_kv(path, allowed={f.name for f in fields(cls)}))


@dataclass
class CellTargets:
    """Anchor cells attached to ground-truth lanes, with their target segments."""

    anchors: list
    lane: np.ndarray  # ground-truth lane index per cell
    order: np.ndarray
    positive: np.ndarray
    gt_seg: np.ndarray  # (n_positive, 5)

    @property
    def n_cells(self):
        return len(self.anchors)

    @property
    def n_positive(self):
        return int(self.positive.sum())


def build_cell_targets(gt_lanes, cfg, rng):
    anchors, lane, order, positive, segs = [], [], [], [], []
    for i, Q in enumerate(gt_lanes):
        cells = sample_training_anchors(Q, rng, B=cfg.cells_per_lane, r_m=cfg.cell_size,
                                        jitter=cfg.jitter, neg_ratio=cfg.neg_ratio,
                                        lanes=gt_lanes, lane_id=i)
        for c in cells:
            hit = nearest_gt_segment(gt_lanes, c) if c.positive else None
            anchors.append(c)
            lane.append(i)
            order.append(c.order_index)
            positive.append(hit is not None)
            if hit is not None:
                segs.append(hit[1].to_array())
    return CellTargets(anchors, np.array(lane, dtype=int), np.array(order, dtype=int),
                       np.array(positive, dtype=bool), np.array(segs, dtype=float).reshape(-1, 5))


def empty_cells():
    return CellTargets([], np.empty(0, int), np.empty(0, int), np.empty(0, bool), np.empty((0, 5)))


class FitProblem:
    """Ground-truth slots and cells with per-lane projection data cached."""

    def __init__(self, gts, cells=None):
        self.gts = list(gts)
        self.cells = cells if cells is not None else empty_cells()
        self.labels = np.array([g.label for g in self.gts], dtype=int)
        self.lane_rows = np.nonzero(self.labels == 1)[0]
        self.lane_data = {}
        for i in self.lane_rows:
            g = self.gts[i]
            g.require_lane()
            t = project_to_axis(g.p_s, g.p_e, g.Q)
            self.lane_data[int(i)] = (np.asarray(g.Q, float), t, free_basis(t))
        self.terminals = np.zeros((len(self.gts), 6))
        for i in self.lane_rows:
            self.terminals[i] = np.concatenate([self.gts[i].p_s, self.gts[i].p_e])
        # map ground-truth lane index (position among lanes) -> slot row
        self.lane_row_of = {k: int(r) for k, r in enumerate(self.lane_rows)}
        c = self.cells
        pos_idx = np.nonzero(c.positive)[0]
        self.pos_lane = c.lane[pos_idx]
        self.pos_order = c.order[pos_idx]
        self.smooth_groups = []
        for lane_id in np.unique(self.pos_lane):
            sel = np.nonzero(self.pos_lane == lane_id)[0]
            self.smooth_groups.append(sel[np.argsort(self.pos_order[sel], kind="stable")])
        self.cell_labels = c.positive.astype(int)

    @property
    def n_slots(self):
        return len(self.gts)


@dataclass
class ModelState:
    slots: np.ndarray  # (N, 12): A, B, p_s, p_e
    slot_logits: np.ndarray  # (N,)
    segs: np.ndarray  # (n_positive, 5): x, y, z, l, alpha
    cell_logits: np.ndarray  # (n_cells,)

    def layout(self):
        sizes = [("slots", self.slots.size), ("slot_logits", self.slot_logits.size),
                 ("segs", self.segs.size), ("cell_logits", self.cell_logits.size)]
        out, start = {}, 0
        for name, n in sizes:
            out[name] = slice(start, start + n)
            start += n
        return out

    def to_vector(self):
        return np.concatenate([self.slots.ravel(), self.slot_logits, self.segs.ravel(), self.cell_logits])

    def with_vector(self, x):
        lay = self.layout()
        if len(x) != lay["cell_logits"].stop:
            raise ShapeMismatchError("flat vector does not match the state layout")
        return ModelState(x[lay["slots"]].reshape(self.slots.shape).copy(), x[lay["slot_logits"]].copy(),
                          x[lay["segs"]].reshape(self.segs.shape).copy(), x[lay["cell_logits"]].copy())

    def describe(self, index):
        for name, sl in self.layout().items():
            if sl.start <= index < sl.stop:
                return f"{name}[{index - sl.start}]"
        raise IndexError(index)

    def curves(self):
        return [CurveParams.from_vector(v) for v in self.slots]

    def probs(self):
        return 1.0 / (1.0 + np.exp(-self.slot_logits))

    def copy(self):
        return self.with_vector(self.to_vector())


class LossBreakdown(NamedTuple):
    total: float
    gsm: float
    f: float
    cls_global: float
    lsm: float
    kl: float
    sm: float
    cls: float
    z: float


def match(state, problem, lam1):
    """Hungarian matching on the terminal/probability cost; perm[i] is the
    slot assigned to ground-truth row i."""
    p = state.probs()
    term = state.slots[:, 6:12]
    D = np.empty((problem.n_slots, problem.n_slots))
    lane = problem.labels == 1
    l1 = np.abs(problem.terminals[:, None, :] - term[None, :, :]).sum(axis=2)
    D[lane] = -lam1 * p[None, :] + l1[lane]
    D[~lane] = -lam1 * (1.0 - p)[None, :]
    return hungarian(D)


def _finite(term, value):
    if not np.isfinite(value):
        raise NonFiniteLossError(term)
    return value


def evaluate_loss(x, state_like, problem, cfg, matching, include_local=True):
    """Loss and flat gradient at parameter vector ``x`` for a fixed matching."""
    state = state_like.with_vector(x)
    lay = state.layout()
    grad = np.zeros_like(x)
    g_slots = grad[lay["slots"]].reshape(state.slots.shape)
    g_seg = grad[lay["segs"]].reshape(state.segs.shape)

    matched_logits = state.slot_logits[matching]
    cls_vals, cls_grad = bce_logits(matched_logits, problem.labels)
    cls_global = _finite("L_cls(global)", cfg.lam1 * float(cls_vals.sum()))
    np.add.at(grad[lay["slot_logits"]], matching, cfg.lam1 * cls_grad)

    f_total = 0.0
    for i, (Q, t, w) in problem.lane_data.items():
        j = matching[i]
        val, g = fit_loss_from_free(state.slots[j], t, Q, w)
        f_total += val
        g_slots[j] += g
    _finite("L_f", f_total)
    gsm = cls_global + f_total

    kl = sm = cls = z = 0.0
    lsm = 0.0
    if include_local and problem.cells.n_cells:
        if len(state.segs):
            kl, g_kl = symmetric_kl_batch(state.segs, problem.cells.gt_seg, cfg.width)
            _finite("L_kl", kl)
            g_seg += cfg.lam2 * g_kl
            groups = [state.segs[sel, :3] for sel in problem.smooth_groups]
            sm, g_sm = smoothness_loss(groups)
            _finite("L_sm", sm)
            for sel, g in zip(problem.smooth_groups, g_sm):
                g_seg[sel, :3] += cfg.lam3 * g
            dz = state.segs[:, 2] - problem.cells.gt_seg[:, 2]
            z = _finite("L_z", float(np.mean(dz**2)))
            g_seg[:, 2] += 2.0 * dz / len(dz)
        c_vals, c_grad = bce_logits(state.cell_logits, problem.cell_labels)
        cls = _finite("L_cls(local)", float(c_vals.sum()))
        grad[lay["cell_logits"]] += cfg.lam1 * c_grad
        lsm = cfg.lam2 * kl + cfg.lam3 * sm + cfg.lam1 * cls + z
    total = _finite("L", gsm + lsm)
    return LossBreakdown(total, gsm, f_total, cls_global, lsm, kl, sm, cls, z), grad


def total_loss(state, gts, cells, cfg, iteration=None, matching=None):
    """Combined objective and its gradient (a ModelState of partials).

    The local term is skipped while ``iteration < cfg.warmup_iters``.
    """
    problem = gts if isinstance(gts, FitProblem) else FitProblem(gts, cells)
    if matching is None:
        matching = match(state, problem, cfg.lam1)
    include_local = iteration is None or iteration >= cfg.warmup_iters
    parts, grad = evaluate_loss(state.to_vector(), state, problem, cfg, matching, include_local)
    return parts, state.with_vector(grad), matching


class GradCheck(NamedTuple):
    max_rel_error: float
    index: int
    name: str


def relative_error(analytic, numeric, floor=1e-2):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero partials from
    dominating through finite-difference roundoff."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(state, gts, cells, cfg, step=1e-6, matching=None, include_local=True, floor=1e-2):
    """Central finite differences against the analytic gradient on every coordinate."""
    problem = gts if isinstance(gts, FitProblem) else FitProblem(gts, cells)
    if matching is None:
        matching = match(state, problem, cfg.lam1)
    x0 = state.to_vector()
    _, g = evaluate_loss(x0, state, problem, cfg, matching, include_local)
    num = np.empty_like(x0)
    for k in range(len(x0)):
        xp = x0.copy()
        xm = x0.copy()
        xp[k] += step
        xm[k] -= step
        lp, _ = evaluate_loss(xp, state, problem, cfg, matching, include_local)
        lm, _ = evaluate_loss(xm, state, problem, cfg, matching, include_local)
        num[k] = (lp.total - lm.total) / (2 * step)
    err = relative_error(g, num, floor)
    k = int(np.argmax(err)) if len(err) else 0
    return GradCheck(float(err[k]) if len(err) else 0.0, k, state.describe(k) if len(err) else "")


def check_function_gradient(fun, x, step=1e-6, floor=1e-2):
    """Finite-difference check for any ``fun(x) -> (value, grad)``."""
    x = np.asarray(x, dtype=float)
    _, g = fun(x)
    num = np.empty_like(x)
    for k in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        num[k] = (fun(xp)[0] - fun(xm)[0]) / (2 * step)
    err = relative_error(np.asarray(g, float).ravel(), num, floor)
    k = int(np.argmax(err))
    return GradCheck(float(err[k]), k, f"x[{k}]")


@dataclass
class FitResult:
    state: ModelState
    trace: list  # dicts: iter, loss, L_GSM, L_kl, L_sm, L_cls, L_z
    matching: np.ndarray
    iterations: int
    rejected_steps: int = 0
    smoothed: list = field(default_factory=list)

    def write_trace(self, path):
        cols = ["iter", "loss", "L_GSM", "L_kl", "L_sm", "L_cls", "L_z"]
        lines = [",".join(cols)]
        lines += [",".join(repr(float(r[c])) if c != "iter" else str(r[c]) for c in cols) for r in self.trace]
        Path(path).write_text("\n".join(lines) + "\n")


def _project(x, lay, n_seg):
    segs = x[lay["segs"]].reshape(n_seg, 5)
    np.maximum(segs[:, 3], MIN_SEGMENT_LENGTH, out=segs[:, 3])
    segs[:, 4] = wrap_heading(segs[:, 4])
    x[lay["segs"]] = segs.ravel()
    return x


def _lr_at(cfg, it):
    frac = min(it / max(cfg.iters - 1, 1), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))


def _row(it, parts):
    return {"iter": it, "loss": parts.total, "L_GSM": parts.gsm, "L_kl": parts.kl,
            "L_sm": parts.sm, "L_cls": parts.cls, "L_z": parts.z}


def optimize(init, gts, cells, cfg):
    """Adam with cosine step decay and a step-acceptance test.

    A step is accepted when, under the current matching and objective, the
    loss rises by no more than ``step_tol * max(|L|, 1e-6)``; otherwise it is
    halved up to ``max_backtracks`` times and finally skipped (moments reset).
    """
    problem = gts if isinstance(gts, FitProblem) else FitProblem(gts, cells)
    state = init.copy()
    lay = state.layout()
    n_seg = len(state.segs)
    x = _project(state.to_vector(), lay, n_seg)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    matching = match(state, problem, cfg.lam1)

    def ev(xv, it):
        return evaluate_loss(xv, state, problem, cfg, matching, it >= cfg.warmup_iters)

    # clipped cross-entropy never drops below about EPS per term
    floor = cfg.loss_floor + 1.01 * EPS * cfg.lam1 * (problem.n_slots + problem.cells.n_cells)
    parts, g = ev(x, 0)
    trace = [_row(0, parts)]
    rejected = 0
    quiet = 0
    it = 0
    adam_t = 0
    for it in range(1, cfg.iters + 1):
        if parts.total <= floor:
            break
        refresh = False
        if it % cfg.rematch_every == 0:
            new = match(state.with_vector(x), problem, cfg.lam1)
            refresh = not np.array_equal(new, matching)
            matching = new
        if it == cfg.warmup_iters:
            refresh = True
        if refresh:
            parts, g = ev(x, it)
        adam_t += 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**adam_t)
        vhat = v / (1 - cfg.beta2**adam_t)
        step = -_lr_at(cfg, it) * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        allowed = parts.total + cfg.step_tol * max(abs(parts.total), 1e-6)
        for _ in range(cfg.max_backtracks + 1):
            x_new = _project(x + step, lay, n_seg)
            new_parts, g_new = ev(x_new, it)
            if new_parts.total <= allowed:
                break
            step *= 0.5
        else:
            rejected += 1
            m[:] = 0.0
            v[:] = 0.0
            adam_t = 0
            trace.append(_row(it, parts))
            continue
        delta = abs(parts.total - new_parts.total)
        x, parts, g = x_new, new_parts, g_new
        trace.append(_row(it, parts))
        if parts.total > cfg.diverge_limit:
            raise DivergenceError(f"loss {parts.total:.3g} exceeded {cfg.diverge_limit:g}", trace)
        quiet = quiet + 1 if delta < cfg.tol * (1 + abs(parts.total)) else 0
        if quiet >= cfg.patience and it > cfg.warmup_iters:
            break
    final = state.with_vector(x)
    smoothed = list(np.minimum.accumulate([r["loss"] for r in trace]))
    log.debug("optimize: %d iterations, final loss %.6g, %d rejected steps", it, parts.total, rejected)
    return FitResult(final, trace, match(final, problem, cfg.lam1), it, rejected, smoothed)


# ---------------------------------------------------------------- initialisation


def init_state(slot_curves, slot_logits, problem, cfg):
    """Assemble a state; segments start on the matched slot curve near each cell."""
    n = problem.n_slots
    slots = np.array([c.free_vector() for c in slot_curves]).reshape(n, 12)
    cells = problem.cells
    state = ModelState(slots, np.asarray(slot_logits, float).copy(),
                       np.zeros((cells.n_positive, 5)), np.zeros(cells.n_cells))
    if cells.n_positive:
        perm = match(state, problem, cfg.lam1)
        dense = {}
        pos_idx = np.nonzero(cells.positive)[0]
        for k, ci in enumerate(pos_idx):
            row = problem.lane_row_of[int(cells.lane[ci])]
            j = int(perm[row])
            if j not in dense:
                dense[j] = sample_uniform(slot_curves[j], 400)
            pts = dense[j]
            c = np.asarray(cells.anchors[ci].center)
            q = int(np.argmin(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])))
            a, b = pts[max(q - 1, 0)], pts[min(q + 1, len(pts) - 1)]
            alpha = float(bar_heading(b[0] - a[0], b[1] - a[1]))
            state.segs[k] = [pts[q, 0], pts[q, 1], pts[q, 2], cfg.cell_size, alpha]
    return state


def random_padding_curves(count, region, rng, margin=1.0):
    x0, y0, x1, y1 = region.bounds
    out = []
    for _ in range(count):
        p_s = np.array([rng.uniform(x0 + margin, x1 - margin), rng.uniform(y0 + margin, y1 - margin), 0.0])
        ang = rng.uniform(0, 2 * np.pi)
        p_e = p_s + np.array([np.cos(ang), np.sin(ang), 0.0]) * rng.uniform(3.0, 10.0)
        out.append(CurveParams.from_free(np.zeros(3), np.zeros(3), p_s, p_e))
    return out


def make_problem(gt_lanes, cfg, rng, with_cells=True):
    gts = pad_slots(gt_lanes, cfg.n_slots)
    cells = build_cell_targets(gt_lanes, cfg, rng) if with_cells and gt_lanes else None
    return FitProblem(gts, cells)


def predicted_lanes(state, cfg):
    """Slot curves whose lane probability reaches the configured threshold."""
    keep = state.probs() >= cfg.prob_threshold
    return [c for c, k in zip(state.curves(), keep) if k]


def point_outputs(state, problem, min_prob=0.5):
    """Per ground-truth lane, the ordered segment centres of cells classified positive."""
    cells = problem.cells
    pos_idx = np.nonzero(cells.positive)[0]
    probs = 1.0 / (1.0 + np.exp(-state.cell_logits[pos_idx]))
    out = []
    for sel in problem.smooth_groups:
        keep = sel[probs[sel] >= min_prob]
        if len(keep) >= 2:
            out.append(state.segs[keep, :3].copy())
    return out
