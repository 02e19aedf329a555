"""Scene-level experiments composed from the core modules."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .bev import rasterize
from .curve import CurveParams, fit_curve, curve_fit_loss
from .engine import (FitConfig, init_state, make_problem, optimize, predicted_lanes,
                     random_padding_curves, point_outputs)
from .evaluate import DEFAULT_SPACING, DEFAULT_THRESHOLDS, evaluate
from .seeding import SeedConfig, seed_curves
from .synth import CloudConfig, SceneConfig, generate_scene, synthesize_cloud


@dataclass
class SceneOutcome:
    seed: int
    n_lanes: int
    report: object
    point_report: object
    lane_fit_loss: list
    padded_probs: list
    iterations: int
    fitted: list = field(default_factory=list)
    trace: object = None
    n_seeds: int = 0

    def summary(self):
        return {
            "seed": self.seed,
            "n_lanes": self.n_lanes,
            "f1@0.10": self.report.f1(0.10) if 0.10 in self.report.results else None,
            "f1@0.30": self.report.f1(0.30) if 0.30 in self.report.results else None,
            "point_f1@0.10": self.point_report.f1(0.10) if self.point_report else None,
            "max_lane_fit_loss": max(self.lane_fit_loss, default=0.0),
            "max_padded_prob": max(self.padded_probs, default=0.0),
            "iterations": self.iterations,
            "n_seeds": self.n_seeds,
        }


def perturbed_curves(gt_lanes, rng, offset=0.5, scale=1.2):
    """Ground-truth fits with each terminal moved ``offset`` m in a random
    planar direction and the free cubic coefficients scaled by ``scale``."""
    out = []
    for Q in gt_lanes:
        th = fit_curve(Q).theta
        moved = []
        for p in (th.p_s, th.p_e):
            ang = rng.uniform(0, 2 * np.pi)
            moved.append(p + offset * np.array([np.cos(ang), np.sin(ang), 0.0]))
        out.append(CurveParams.from_free(scale * th.A, scale * th.B, *moved))
    return out


def _slot_layout(lane_curves, problem, region, rng):
    """Put lane curves into random slots, fill the rest with padding curves."""
    n = problem.n_slots
    curves = random_padding_curves(n, region, rng)
    where = rng.permutation(n)[: len(lane_curves)]
    for c, j in zip(lane_curves, where):
        curves[j] = c
    return curves


def _finish(scene, result, problem, fit_cfg, thresholds, spacing, seed):
    state = result.state
    lanes = predicted_lanes(state, fit_cfg)
    report = evaluate(lanes, scene.lanes, thresholds, spacing)
    points = point_outputs(state, problem)
    point_report = evaluate(points, scene.lanes, thresholds, spacing) if problem.cells.n_cells else None
    curves = state.curves()
    perm = result.matching
    fit_losses = [curve_fit_loss(curves[perm[i]], problem.gts[i].Q,
                                 (problem.gts[i].p_s, problem.gts[i].p_e))[0]
                  for i in problem.lane_rows]
    probs = state.probs()
    padded = [float(probs[perm[i]]) for i in range(problem.n_slots) if problem.gts[i].label == 0]
    return SceneOutcome(seed, len(scene.lanes), report, point_report, fit_losses, padded,
                        result.iterations, lanes, result)


def fit_scene(scene, bev=None, fit_cfg=None, seed_cfg=None, seed=0, init="seeds",
              thresholds=DEFAULT_THRESHOLDS, spacing=DEFAULT_SPACING):
    """Optimise slots for a scene whose lanes serve as supervision.

    ``init="seeds"`` starts from curves found in the BEV (rasterized from the
    scene cloud when ``bev`` is None); ``init="perturbed"`` starts from
    perturbed ground-truth fits.
    """
    fit_cfg = fit_cfg or FitConfig()
    if init == "seeds":
        bev = bev if bev is not None else rasterize(scene.cloud, scene.region)
        curves = seed_curves(bev, seed_cfg or SeedConfig())[: fit_cfg.n_slots]
        rng = np.random.default_rng([seed, 2])
    elif init == "perturbed":
        rng = np.random.default_rng([seed, 1])
    else:
        raise ValueError(f"unknown init {init!r}")
    problem = make_problem(scene.lanes, fit_cfg, rng)
    if init == "perturbed":
        curves = perturbed_curves(scene.lanes, rng)
    n_seeds = len(curves)
    curves = _slot_layout(curves, problem, scene.region, rng)
    start = init_state(curves, np.zeros(problem.n_slots), problem, fit_cfg)
    result = optimize(start, problem, None, fit_cfg)
    out = _finish(scene, result, problem, fit_cfg, thresholds, spacing, seed)
    out.n_seeds = n_seeds
    return out


def perturbation_recovery(seed, fit_cfg=None, scene_cfg=None, thresholds=DEFAULT_THRESHOLDS,
                          spacing=DEFAULT_SPACING):
    """Initialise from perturbed ground truth and optimise the full objective."""
    scene = generate_scene(replace(scene_cfg or SceneConfig(), seed=seed))
    return fit_scene(scene, None, fit_cfg, None, seed, "perturbed", thresholds, spacing)


def demo_scene(seed, fit_cfg=None, scene_cfg=None, cloud_cfg=None, seed_cfg=None,
               thresholds=DEFAULT_THRESHOLDS, spacing=DEFAULT_SPACING):
    """Synthesize, rasterize, seed from the BEV, optimise and evaluate one scene."""
    scene = generate_scene(replace(scene_cfg or SceneConfig(), seed=seed))
    scene.cloud = synthesize_cloud(scene, replace(cloud_cfg or CloudConfig(), seed=seed))
    return fit_scene(scene, None, fit_cfg, seed_cfg, seed, "seeds", thresholds, spacing)


def gradient_case(seed, n_slots=8, cells_per_lane=8, scene_cfg=None, seg_noise=0.1):
    """A random but realistic state for gradient checks.

    Slots hold perturbed ground-truth curves (random padding elsewhere),
    segments sit near their targets, and every logit is drawn at random.
    Returns (state, problem, fit config).
    """
    fit_cfg = FitConfig(n_slots=n_slots, cells_per_lane=cells_per_lane, warmup_iters=0)
    sc = replace(scene_cfg or SceneConfig(), seed=seed)
    sc = replace(sc, lanes_min=min(sc.lanes_min, n_slots), lanes_max=min(sc.lanes_max, n_slots))
    scene = generate_scene(sc)
    rng = np.random.default_rng([seed, 3])
    problem = make_problem(scene.lanes, fit_cfg, rng)
    curves = _slot_layout(perturbed_curves(scene.lanes, rng), problem, scene.region, rng)
    state = init_state(curves, rng.normal(size=problem.n_slots), problem, fit_cfg)
    cells = problem.cells
    if cells.n_positive:
        state.segs = cells.gt_seg + rng.normal(scale=seg_noise, size=cells.gt_seg.shape)
        state.segs[:, 3] = np.abs(state.segs[:, 3]) + 0.05
    state.cell_logits = rng.normal(size=cells.n_cells)
    return state, problem, fit_cfg
