import json

import numpy as np
import pytest

from lanegeom.bev import load_point_cloud, save_point_cloud
from lanegeom.errors import InfeasibleConfigError
from lanegeom.polyline import cumulative_length, point_to_polyline_distance
from lanegeom.synth import (CloudConfig, Scene, SceneConfig, generate_scene, load_scene,
                            shared_prefix_length, synthesize_cloud)


def test_fixed_lane_count_deterministic():
    cfg = SceneConfig(lanes_min=3, lanes_max=3, seed=11)
    a, b = generate_scene(cfg), generate_scene(cfg)
    assert len(a.lanes) == 3
    for x, y in zip(a.lanes, b.lanes):
        assert np.array_equal(x, y)


def test_zero_lanes():
    scene = generate_scene(SceneConfig(lanes_min=0, lanes_max=0, seed=1))
    assert scene.lanes == []
    assert len(synthesize_cloud(scene)) > 0


def test_lanes_inside_region():
    for seed in range(30):
        scene = generate_scene(SceneConfig(seed=seed, lanes_min=0, lanes_max=8, spacing=2.5))
        assert 0 <= len(scene.lanes) <= 8
        x0, y0, x1, y1 = scene.region.bounds
        for lane in scene.lanes:
            assert len(lane) >= 2
            assert lane[:, 0].min() >= x0 and lane[:, 0].max() <= x1
            assert lane[:, 1].min() >= y0 and lane[:, 1].max() <= y1
            # lower terminal first
            assert (lane[0, 1], lane[0, 0]) <= (lane[-1, 1], lane[-1, 0])


def test_split_shares_prefix():
    found = 0
    for seed in range(20):
        scene = generate_scene(SceneConfig(seed=seed, split_prob=1.0))
        best = max(shared_prefix_length(a, b) for i, a in enumerate(scene.lanes)
                   for b in scene.lanes[i + 1:])
        if best > 0:
            found += 1
            assert best >= 2.0
    assert found >= 10


def test_merge_shares_suffix():
    scene = generate_scene(SceneConfig(seed=3, merge_prob=1.0, lanes_min=2, lanes_max=2))
    assert len(scene.lanes) == 3
    assert shared_prefix_length(scene.lanes[0], scene.lanes[2]) + \
        shared_prefix_length(scene.lanes[1], scene.lanes[2]) >= 2.0


def test_shared_prefix_oracle():
    a = np.column_stack([np.zeros(11), np.arange(11.0), np.zeros(11)])
    b = a.copy()
    b[6:, 0] += 1.0
    assert shared_prefix_length(a, b) == pytest.approx(5.0)
    assert shared_prefix_length(a, a + 1) == 0.0


def test_infeasible_configs():
    with pytest.raises(InfeasibleConfigError):
        generate_scene(SceneConfig(lanes_min=8, lanes_max=8, spacing=4.0))
    with pytest.raises(InfeasibleConfigError):
        generate_scene(SceneConfig(lanes_min=5, lanes_max=3))
    with pytest.raises(InfeasibleConfigError):
        generate_scene(SceneConfig(lanes_min=1, lanes_max=9))


def test_cloud_deterministic():
    scene = generate_scene(SceneConfig(seed=2))
    a = synthesize_cloud(scene, CloudConfig(seed=7))
    b = synthesize_cloud(scene, CloudConfig(seed=7))
    assert a.tobytes() == b.tobytes()
    assert a.shape[1] == 4
    assert np.all(a[:, 3] >= 0)


def test_no_paint_without_density():
    scene = generate_scene(SceneConfig(seed=2))
    cfg = CloudConfig(paint_density=0.0, seed=1)
    cloud = synthesize_cloud(scene, cfg)
    assert cloud[:, 3].max() < cfg.road_intensity + 8 * cfg.road_intensity_sigma
    assert len(cloud) == pytest.approx(cfg.road_density * 625, rel=0.02)


def test_paint_is_brighter_by_three_sigma():
    cfg = CloudConfig()
    for seed in range(5):
        scene = generate_scene(SceneConfig(seed=seed))
        cloud = synthesize_cloud(scene, CloudConfig(seed=seed))
        cloud = cloud[np.random.default_rng(seed).permutation(len(cloud))[:15_000]]
        d = np.min([point_to_polyline_distance(cloud[:, :3], l, planar=True) for l in scene.lanes], axis=0)
        near = d <= cfg.paint_half_width
        assert cloud[near, 3].mean() - cloud[~near, 3].mean() >= 3 * cfg.road_intensity_sigma


def test_paint_points_hug_lanes():
    scene = generate_scene(SceneConfig(seed=8))
    cfg = CloudConfig(road_density=1e-3, seed=8)
    cloud = synthesize_cloud(scene, cfg)
    bright = cloud[cloud[:, 3] > 30]
    d = np.min([point_to_polyline_distance(bright[:, :3], l, planar=True) for l in scene.lanes], axis=0)
    assert d.max() <= cfg.paint_half_width + 1e-9
    # paint count tracks painted area
    area = sum(cumulative_length(l, planar=True)[-1] for l in scene.lanes) * 2 * cfg.paint_half_width
    assert len(cloud) == pytest.approx(cfg.paint_density * area, rel=0.05)


def test_bad_density():
    with pytest.raises(ValueError):
        synthesize_cloud(generate_scene(SceneConfig(seed=0)), CloudConfig(road_density=0))


def test_scene_json_round_trip(tmp_path):
    scene = generate_scene(SceneConfig(seed=5))
    scene.cloud = synthesize_cloud(scene, CloudConfig(seed=5))
    save_point_cloud(tmp_path / "c.lgpc", scene.cloud, "binary")
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(scene.to_dict(cloud_ref="c.lgpc")))
    back = load_scene(path)
    assert back.region == scene.region
    assert back.seed == 5
    for a, b in zip(back.lanes, scene.lanes):
        assert np.array_equal(a, b)
    assert back.cloud.tobytes() == load_point_cloud(tmp_path / "c.lgpc").tobytes()


def test_scene_without_cloud_reference():
    scene = generate_scene(SceneConfig(seed=5))
    back = Scene.from_dict(json.loads(json.dumps(scene.to_dict())))
    assert back.cloud.shape == (0, 4)
