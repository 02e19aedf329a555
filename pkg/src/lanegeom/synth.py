"""Synthetic lane scenes with exact ground truth and matching point clouds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bev import GridSpec, as_cloud, load_point_cloud
from .curve import orient_lane
from .errors import InfeasibleConfigError
from .polyline import cumulative_length, interpolate_at

MAX_LANES = 8


@dataclass
class SceneConfig:
    lanes_min: int = 3
    lanes_max: int = 6
    bend_min: float = 0.0  # peak lateral deviation from the chord, metres
    bend_max: float = 1.5
    spacing: float = 3.5
    split_prob: float = 0.0
    merge_prob: float = 0.0
    side: float = 25.0
    resolution: float = 0.03125
    margin: float = 0.5
    min_length: float = 10.0
    sample_step: float = 0.25
    seed: int = 0


@dataclass
class CloudConfig:
    road_density: float = 100.0  # points per m^2
    paint_density: float = 2000.0
    paint_half_width: float = 0.075
    paint_intensity: float = 60.0
    paint_intensity_sigma: float = 8.0
    road_intensity: float = 10.0
    road_intensity_sigma: float = 3.0
    z_sigma: float = 0.01
    seed: int = 0


@dataclass
class Scene:
    lanes: list
    region: GridSpec
    cloud: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))
    seed: int = 0

    def to_dict(self, cloud_ref=None):
        d = {"lanes": [{"points": np.asarray(l).tolist()} for l in self.lanes],
             "region": self.region.to_dict(), "seed": self.seed}
        if cloud_ref is not None:
            d["cloud"] = str(cloud_ref)
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None):
        lanes = [np.array(l["points"], dtype=float) for l in d["lanes"]]
        cloud = np.empty((0, 4))
        if d.get("cloud"):
            ref = Path(d["cloud"])
            if base_dir is not None and not ref.is_absolute():
                ref = Path(base_dir) / ref
            cloud = load_point_cloud(ref)
        return cls(lanes, GridSpec.from_dict(d["region"]), cloud, d.get("seed", 0))


def load_scene(path):
    path = Path(path)
    return Scene.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def _profile(rng, bend):
    """Lateral offset v(t) vanishing at both ends, peak |v| == bend."""
    a, b = rng.normal(size=2)
    t = np.linspace(0.0, 1.0, 201)
    v = a * (t**3 - t) + b * (t**2 - t)
    peak = np.abs(v).max()
    scale = bend / peak if peak > 0 else 0.0
    return a * scale, b * scale


def _inside(pts, lo, hi):
    return bool(np.all(pts[:, :2] >= lo) and np.all(pts[:, :2] <= hi))


def generate_scene(cfg=None):
    """Parallel cubic lanes, each a graph over its own chord, inside one region.

    Optional split/merge branches share an exact prefix (suffix) with their
    parent lane and then peel away.
    """
    cfg = cfg or SceneConfig()
    if not 0 <= cfg.lanes_min <= cfg.lanes_max <= MAX_LANES:
        raise InfeasibleConfigError("lane count range must satisfy 0 <= min <= max <= 8")
    if cfg.bend_min < 0 or cfg.bend_max < cfg.bend_min:
        raise InfeasibleConfigError("bad bend range")
    usable = cfg.side - 2 * cfg.margin
    if (cfg.lanes_max - 1) * cfg.spacing + 2 * cfg.bend_max >= usable:
        raise InfeasibleConfigError("lane spacing and bend cannot fit inside the region")
    rng = np.random.default_rng(cfg.seed)
    region = GridSpec((0.0, 0.0), int(round(cfg.side / cfg.resolution)),
                      int(round(cfg.side / cfg.resolution)), cfg.resolution)
    n = int(rng.integers(cfg.lanes_min, cfg.lanes_max + 1))
    if n == 0:
        return Scene([], region, seed=cfg.seed)
    lo = np.full(2, cfg.margin)
    hi = np.full(2, cfg.side - cfg.margin)
    centre = np.full(2, cfg.side / 2)

    for _ in range(200):
        phi = rng.uniform(0.0, np.pi)
        d = np.array([np.cos(phi), np.sin(phi)])
        nrm = np.array([-d[1], d[0]])
        a, b = _profile(rng, rng.uniform(cfg.bend_min, cfg.bend_max))
        z0, grade, hump = rng.uniform(-0.2, 0.2), rng.uniform(-0.02, 0.02), rng.uniform(-0.1, 0.1)
        shift = rng.uniform(-0.5, 0.5)
        offsets = (np.arange(n) - (n - 1) / 2) * cfg.spacing + shift
        length = cfg.side * 1.4
        while length >= cfg.min_length:
            m = max(int(np.ceil(length / cfg.sample_step)), 8) + 1
            t = np.linspace(0.0, 1.0, m)
            v = a * (t**3 - t) + b * (t**2 - t)
            z = z0 + grade * length * t + 4 * hump * (t**2 - t)
            base = centre + np.outer(t - 0.5, d) * length
            lanes = []
            for o in offsets:
                xy = base + np.outer(v + o, nrm)
                lanes.append(np.column_stack([xy, z]))
            if all(_inside(l, lo, hi) for l in lanes):
                break
            length *= 0.92
        else:
            continue
        lanes = _add_branches(lanes, t, nrm, cfg, rng, lo, hi)
        return Scene([orient_lane(l) for l in lanes], region, seed=cfg.seed)
    raise InfeasibleConfigError("could not place lanes inside the region")


def _add_branches(lanes, t, nrm, cfg, rng, lo, hi):
    out = list(lanes)
    for kind, prob in (("split", cfg.split_prob), ("merge", cfg.merge_prob)):
        if len(out) >= MAX_LANES or rng.random() >= prob:
            continue
        parent = lanes[int(rng.integers(0, len(lanes)))]
        t0 = rng.uniform(0.3, 0.5)
        side = rng.choice([-1.0, 1.0]) * 0.6 * cfg.spacing
        if kind == "split":
            w = np.clip((t - t0) / (1 - t0), 0.0, None) ** 2
        else:
            w = np.clip((1 - t0 - t) / (1 - t0), 0.0, None) ** 2
        branch = parent.copy()
        branch[:, :2] += np.outer(side * w, nrm)
        if _inside(branch, lo, hi):
            out.append(branch)
    return out


def shared_prefix_length(a, b, tol=1e-9):
    """Arc length over which two polylines coincide from a common start
    (either end of each is tried)."""
    best = 0.0
    for p in (a, a[::-1]):
        for q in (b, b[::-1]):
            k = 0
            while k < min(len(p), len(q)) and np.linalg.norm(p[k] - q[k]) <= tol:
                k += 1
            if k >= 2:
                best = max(best, float(cumulative_length(p[:k])[-1]))
    return best


def synthesize_cloud(scene, cfg=None):
    """Low-intensity road points over the region plus high-intensity paint
    points within ``paint_half_width`` of each lane."""
    cfg = cfg or CloudConfig()
    if cfg.road_density <= 0 or cfg.paint_density < 0:
        raise ValueError("densities must be positive")
    rng = np.random.default_rng(cfg.seed)
    x0, y0, x1, y1 = scene.region.bounds
    area = (x1 - x0) * (y1 - y0)

    lane_pts = np.concatenate(scene.lanes) if scene.lanes else np.empty((0, 3))
    if len(lane_pts) >= 3:
        A = np.column_stack([lane_pts[:, :2], np.ones(len(lane_pts))])
        plane, *_ = np.linalg.lstsq(A, lane_pts[:, 2], rcond=None)
    else:
        plane = np.zeros(3)

    n_road = rng.poisson(cfg.road_density * area)
    xy = np.column_stack([rng.uniform(x0, x1, n_road), rng.uniform(y0, y1, n_road)])
    z = xy @ plane[:2] + plane[2] + rng.normal(0.0, cfg.z_sigma, n_road)
    r = np.clip(rng.normal(cfg.road_intensity, cfg.road_intensity_sigma, n_road), 0.0, None)
    parts = [np.column_stack([xy, z, r])]

    for lane in scene.lanes:
        if cfg.paint_density == 0:
            break
        cum = cumulative_length(lane, planar=True)
        n_paint = rng.poisson(cfg.paint_density * cum[-1] * 2 * cfg.paint_half_width)
        s = rng.uniform(0.0, cum[-1], n_paint)
        centre = interpolate_at(lane, s, cum)
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lane) - 2)
        tang = lane[idx + 1, :2] - lane[idx, :2]
        tang /= np.linalg.norm(tang, axis=1, keepdims=True)
        nrm = np.column_stack([-tang[:, 1], tang[:, 0]])
        u = rng.uniform(-cfg.paint_half_width, cfg.paint_half_width, n_paint)
        pxy = centre[:, :2] + u[:, None] * nrm
        pz = centre[:, 2] + rng.normal(0.0, cfg.z_sigma, n_paint)
        pr = np.clip(rng.normal(cfg.paint_intensity, cfg.paint_intensity_sigma, n_paint), 0.0, None)
        parts.append(np.column_stack([pxy, pz, pr]))

    cloud = np.concatenate(parts)
    cloud = cloud[scene.region.contains(cloud[:, :2])]
    return as_cloud(cloud)
