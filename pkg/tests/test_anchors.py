import json
import math

import numpy as np
import pytest

from lanegeom.anchors import (AnchorCell, extract_gt_segment, nearest_gt_segment,
                              sample_inference_anchors, sample_training_anchors)
from lanegeom.curve import ArcLengthTable, CurveParams, curvature
from lanegeom.errors import PlacementError
from lanegeom.synth import SceneConfig, generate_scene

from oracles import ArcLocator


def straight_lane(p0, p1, n=50):
    t = np.linspace(0, 1, n)[:, None]
    return np.asarray(p0, float) + t * (np.asarray(p1, float) - np.asarray(p0, float))


def s_curve(amp=8.0, length=20.0):
    # x(t) = amp * (t^3 - 1.5 t^2 + 0.5 t): inflection at mid-length
    return CurveParams.from_free(np.array([amp, 0, 0]), np.array([-1.5 * amp, 0, 0]),
                                 np.array([0.0, 0, 0]), np.array([0.0, length, 0]))


def point_segment_distance(p, a, b):
    """Plain-python planar distance from p to segment ab."""
    ax, ay, bx, by = a[0], a[1], b[0], b[1]
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    u = 0.0 if L2 == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / L2))
    return math.hypot(p[0] - ax - u * dx, p[1] - ay - u * dy)


# ------------------------------------------------------------------ training anchors

def test_straight_lane_spacing():
    lane = straight_lane([0, 0, 0], [0, 39, 0])
    cells = sample_training_anchors(lane, np.random.default_rng(0), B=40, jitter=0, neg_ratio=0)
    centres = np.array([c.center for c in cells])
    assert len(cells) == 40
    assert np.allclose(centres[:, 1], np.arange(40.0), atol=1e-12)
    assert np.all(centres[:, 0] == 0)


def test_neg_ratio_zero_gives_only_positives():
    lane = straight_lane([0, 0, 0], [3, 20, 0.5])
    cells = sample_training_anchors(lane, np.random.default_rng(1), B=17, neg_ratio=0)
    assert len(cells) == 17
    assert all(c.positive for c in cells)
    assert [c.order_index for c in cells] == list(range(17))


def test_negative_count_and_labels():
    lane = straight_lane([0, 0, 0], [0, 20, 0])
    cells = sample_training_anchors(lane, np.random.default_rng(2), B=10, neg_ratio=0.55)
    neg = [c for c in cells if not c.positive]
    assert len(neg) == math.ceil(0.55 * 10)


def test_negatives_clear_every_lane():
    scene = generate_scene(SceneConfig(seed=3))
    lanes = scene.lanes
    r_m = 1.0
    for seed in range(5):
        cells = sample_training_anchors(lanes[0], np.random.default_rng(seed), r_m=r_m,
                                        lanes=lanes, neg_ratio=1.0)
        for c in cells:
            if c.positive:
                continue
            for lane in lanes:
                d = min(point_segment_distance(c.center, lane[k], lane[k + 1]) for k in range(len(lane) - 1))
                assert d >= r_m


def test_placement_failure_when_crowded():
    # lanes every 0.5 m leave no room for a negative cell
    lanes = [straight_lane([x, -20, 0], [x, 20, 0], n=2) for x in np.arange(-10, 10.5, 0.5)]
    with pytest.raises(PlacementError):
        sample_training_anchors(straight_lane([0, -5, 0], [0, 5, 0]), np.random.default_rng(0), lanes=lanes)


def test_training_anchor_validation():
    lane = straight_lane([0, 0, 0], [0, 5, 0])
    with pytest.raises(ValueError):
        sample_training_anchors(lane, np.random.default_rng(0), B=2)
    with pytest.raises(ValueError):
        sample_training_anchors(lane, np.random.default_rng(0), r_m=0)


def test_jitter_keeps_lane_inside_cell():
    misses = 0
    for trial in range(200):
        scene = generate_scene(SceneConfig(seed=trial))
        lane = scene.lanes[trial % len(scene.lanes)]
        for c in sample_training_anchors(lane, np.random.default_rng(trial), jitter=0.25, neg_ratio=0):
            misses += extract_gt_segment(lane, c) is None
    assert misses == 0


def test_training_anchors_deterministic():
    scene = generate_scene(SceneConfig(seed=9))
    a = sample_training_anchors(scene.lanes[0], np.random.default_rng(5), lanes=scene.lanes)
    b = sample_training_anchors(scene.lanes[0], np.random.default_rng(5), lanes=scene.lanes)
    assert a == b


def test_training_anchors_accept_curves():
    cells = sample_training_anchors(s_curve(), np.random.default_rng(0), B=12, jitter=0, neg_ratio=1)
    assert sum(c.positive for c in cells) == 12
    assert cells[0].center == pytest.approx((0.0, 0.0), abs=1e-12)


# ------------------------------------------------------------------ inference anchors

def test_inference_count_and_order():
    theta = s_curve()
    locate = ArcLocator(theta)
    for B in (3, 10, 40, 77):
        cells = sample_inference_anchors(theta, B=B, gain=5.0)
        assert len(cells) == B
        assert [c.order_index for c in cells] == list(range(B))
        s = [locate(c.center) for c in cells]
        assert np.all(np.diff(s) > 0)


def test_straight_lane_gain_irrelevant():
    theta = CurveParams.from_free(np.zeros(3), np.zeros(3), np.array([1.0, 2, 0]), np.array([4.0, 22, 1]))
    a = sample_inference_anchors(theta, B=20, gain=0.0)
    b = sample_inference_anchors(theta, B=20, gain=7.0)
    ca, cb = np.array([c.center for c in a]), np.array([c.center for c in b])
    assert np.allclose(ca, cb, atol=1e-9)
    gaps = np.hypot(*np.diff(ca, axis=0).T)
    assert np.allclose(gaps, gaps[0], rtol=1e-6)


def test_gain_zero_is_uniform_in_arc_length():
    theta = s_curve()
    cells = sample_inference_anchors(theta, B=21, gain=0.0)
    locate = ArcLocator(theta, n=20001)
    s = np.array([locate(c.center) for c in cells])
    assert np.allclose(s, np.linspace(0, locate.length, 21), atol=2 * locate.length / 20000)


def test_gain_concentrates_cells_where_curvature_is_high():
    theta = s_curve()
    table = ArcLengthTable(theta)
    locate = ArcLocator(theta)
    s = locate.s
    kappa = np.abs(curvature(theta, table.t_of_s(s)))
    hi_cut, lo_cut = np.quantile(kappa, [0.75, 0.25])
    B = 40

    def quartile_counts(cells):
        k = [kappa[np.searchsorted(s, locate(c.center))] for c in cells]
        k = np.array(k)
        return int(np.sum(k >= hi_cut)), int(np.sum(k <= lo_cut))

    top, bottom = quartile_counts(sample_inference_anchors(theta, B=B, gain=5.0))
    assert top > bottom
    # numeric integration of the normalised density over each quartile
    dens = 1 + 5.0 * kappa
    expect_top = B * dens[kappa >= hi_cut].sum() / dens.sum()
    expect_bottom = B * dens[kappa <= lo_cut].sum() / dens.sum()
    assert abs(top - expect_top) <= 2
    assert abs(bottom - expect_bottom) <= 2
    top0, bottom0 = quartile_counts(sample_inference_anchors(theta, B=B, gain=0.0))
    assert top > top0


# ------------------------------------------------------------------ segment extraction

def cell_at(x, y, side=1.0):
    return AnchorCell((x, y), side / 2, 0, 0)


def test_horizontal_lane_through_centre():
    seg = extract_gt_segment(straight_lane([-5, 2, 0.3], [5, 2, 0.3]), cell_at(0.0, 2.0))
    assert seg.p_o == pytest.approx((0.0, 2.0, 0.3), abs=1e-12)
    assert seg.l == pytest.approx(1.0, abs=1e-12)
    assert seg.alpha == pytest.approx(np.pi / 2)


def test_diagonal_lane_through_centre():
    seg = extract_gt_segment(straight_lane([-5, -5, 0], [5, 5, 0], n=11), cell_at(0.0, 0.0))
    assert seg.l == pytest.approx(math.sqrt(2), abs=1e-12)
    assert seg.alpha == pytest.approx(-np.pi / 4)
    assert seg.p_o[:2] == pytest.approx((0.0, 0.0), abs=1e-12)


def test_vertical_lane_has_zero_heading():
    seg = extract_gt_segment(straight_lane([0.2, -3, 0], [0.2, 3, 0]), cell_at(0.0, 0.0))
    assert seg.alpha == pytest.approx(0.0, abs=1e-15)
    assert seg.p_o[0] == pytest.approx(0.2)


def test_missing_lane_gives_none():
    assert extract_gt_segment(straight_lane([3, -3, 0], [3, 3, 0]), cell_at(0.0, 0.0)) is None


def test_height_is_interpolated():
    lane = straight_lane([-5, 0, 0.0], [5, 0, 1.0], n=3)
    seg = extract_gt_segment(lane, cell_at(1.0, 0.0))
    assert seg.p_o[2] == pytest.approx(0.6, abs=1e-12)


def test_nearest_piece_wins():
    # a hairpin entering the cell twice: the piece through the centre is chosen
    lane = np.array([[-2, 0.0, 0], [2, 0.0, 0], [2, 0.4, 0], [-2, 0.4, 0]])
    seg = extract_gt_segment(lane, cell_at(0.0, 0.05))
    assert seg.p_o[1] == pytest.approx(0.0)


def test_two_parallel_lanes_nearer_returned():
    near = straight_lane([-3, 0.1, 0], [3, 0.1, 0])
    far = straight_lane([-3, -0.35, 0], [3, -0.35, 0])
    idx, seg = nearest_gt_segment([far, near], cell_at(0.0, 0.0))
    assert idx == 1
    assert seg.p_o[1] == pytest.approx(0.1)
    assert nearest_gt_segment([straight_lane([5, 5, 0], [6, 6, 0])], cell_at(0, 0)) is None


def test_clip_against_pointwise_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        lane = np.cumsum(rng.normal(scale=0.4, size=(30, 3)), axis=0)
        cell = cell_at(*lane[15, :2] + rng.normal(scale=0.2, size=2))
        seg = extract_gt_segment(lane, cell)
        # dense sampling of the polyline and containment gives the clipped length
        t = np.linspace(0, 1, 2001)[:, None]
        inside = 0.0
        for k in range(len(lane) - 1):
            p = lane[k, :2] + t * (lane[k + 1, :2] - lane[k, :2])
            ok = np.all(np.abs(p - cell.center) <= cell.half_size, axis=1)
            inside += ok.mean() * np.hypot(*(lane[k + 1, :2] - lane[k, :2]))
        if seg is None:
            assert inside == 0
        else:
            assert seg.l <= inside + 1e-2
            assert max(abs(seg.p_o[0] - cell.center[0]), abs(seg.p_o[1] - cell.center[1])) <= cell.half_size + 1e-12


# ------------------------------------------------------------------ cells

def test_anchor_cell_json_round_trip():
    c = AnchorCell((1.5, -2.0), 0.5, 3, 7, "neg")
    d = json.loads(json.dumps(c.to_dict()))
    assert d == {"center": [1.5, -2.0], "half_size": 0.5, "lane_id": 3, "order": 7, "label": "neg"}
    assert AnchorCell.from_dict(d) == c


def test_anchor_cell_validation():
    with pytest.raises(ValueError):
        AnchorCell((0, 0), 0.0, 0, 0)
    with pytest.raises(ValueError):
        AnchorCell((0, 0), 1.0, 0, 0, "maybe")
