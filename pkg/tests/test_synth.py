import warnings

import numpy as np
import pytest
from scipy import ndimage

from oracles import binomial_bound
from planmax.grid import rasterize_track_to_plan
from planmax.maxent import log_likelihood, propagate_inferred, solve_inferred
from planmax.metrics import offroad_points
from planmax.synth import (
    TEMPLATES,
    BenchConfig,
    SceneTemplate,
    exit_cells,
    generate_scene,
    generate_tracks,
    make_split,
    scene_seeds,
    true_rewards,
)


def test_corridor_single_column():
    g = generate_scene(SceneTemplate("corridor", size=9, road_width=1), 0)
    cols = np.flatnonzero(g.drivable.any(axis=0))
    assert cols.tolist() == [4]
    assert g.drivable[:, 4].all()
    wide = generate_scene(SceneTemplate("corridor", size=9, road_width=3), 0)
    assert np.flatnonzero(wide.drivable.any(axis=0)).tolist() == [3, 4, 5]


def test_t_junction_three_arms():
    g = generate_scene(SceneTemplate("t-junction", size=11, offset=2), 0)
    r0, c0 = g.agent_cell
    jr = r0 - 2
    core = np.zeros_like(g.drivable)
    core[jr - 1 : jr + 2, c0 - 1 : c0 + 2] = True
    arms, n = ndimage.label(g.drivable & ~core)
    assert n == 3
    # nothing above the cross bar
    assert not g.drivable[: jr - 1].any()
    assert g.drivable[jr, 0] and g.drivable[jr, -1] and g.drivable[-1, c0]


def test_four_way_and_ring_exits():
    g = generate_scene(SceneTemplate("four-way", size=11, offset=1), 0)
    assert g.drivable[0, 5] and g.drivable[4, 0] and g.drivable[4, 10]
    ring = generate_scene(SceneTemplate("ring", size=15), 0)
    assert ring.channels[1].sum() > 0
    assert not np.any(ring.drivable & (ring.channels[1] > 0))
    assert exit_cells(ring).sum() > 0


@pytest.mark.parametrize("kind", ["corridor", "t-junction", "four-way", "ring"])
@pytest.mark.parametrize("width,size", [(1, 11), (3, 15), (5, 21)])
def test_road_templates_four_connected(kind, width, size):
    g = generate_scene(SceneTemplate(kind, size=size, road_width=width), 4)
    _, n = ndimage.label(g.drivable)
    assert n == 1
    assert exit_cells(g, width).any()


@pytest.mark.parametrize("seed", range(10))
def test_field_connected_from_center(seed):
    g = generate_scene(SceneTemplate("field", size=13, density=0.3), seed)
    r0, c0 = g.agent_cell
    assert g.drivable[r0, c0]
    labels, _ = ndimage.label(g.drivable)
    assert np.any((labels == labels[r0, c0]) & exit_cells(g))
    assert g.lane_dir is None


@pytest.mark.parametrize("kind", TEMPLATES)
def test_scenes_deterministic_and_valid(kind):
    a = generate_scene(SceneTemplate(kind, size=15), 11)
    b = generate_scene(SceneTemplate(kind, size=15), 11)
    assert a.channels.tobytes() == b.channels.tobytes()
    r = true_rewards(a)
    pol = solve_inferred(r, 30)
    assert np.isfinite(pol.V[0, a.agent_cell[0] * a.width + a.agent_cell[1]])
    if a.lane_dir is not None:
        assert np.all(np.isnan(a.lane_dir[~a.drivable]))


def test_template_validation():
    for bad in (SceneTemplate("spiral"), SceneTemplate(size=8), SceneTemplate(size=5), SceneTemplate("ring", size=9),
                SceneTemplate(road_width=2), SceneTemplate(offset=9), SceneTemplate(cell_size=0.0)):
        with pytest.raises(ValueError):
            generate_scene(bad, 0)


def test_noise_free_inverse_pair():
    g = generate_scene(SceneTemplate("four-way", size=11, offset=2), 3)
    r = true_rewards(g)
    speed = g.cell_size / 0.4
    agents = generate_tracks(g, r, 50, (speed, speed), 5, N=10, horizon=12, noise=0.0)
    for a in agents:
        back = rasterize_track_to_plan(np.vstack([[0.0, 0.0], a.future]), g)
        assert back == a.plan
        assert not offroad_points(g, a.future).any()
        np.testing.assert_allclose(a.track.positions[-1], [0.0, 0.0])


def test_noise_free_no_offroad():
    for kind in TEMPLATES:
        g = generate_scene(SceneTemplate(kind, size=15), 1)
        agents = generate_tracks(g, true_rewards(g), 20, (2.0, 5.0), 2, noise=0.0, accel_range=(-1.0, 1.0))
        pts = np.concatenate([a.future for a in agents])
        assert not offroad_points(g, pts).any(), kind


def test_rasterized_futures_have_positive_probability():
    g = generate_scene(SceneTemplate("t-junction", size=15, offset=2), 0)
    r = true_rewards(g)
    pol = solve_inferred(r, 30)
    agents = generate_tracks(g, r, 100, (2.0, 5.0), 9, accel_range=(-1.0, 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for a in agents:
            plan = rasterize_track_to_plan(np.vstack([[0.0, 0.0], a.future]), g)
            assert log_likelihood(r, pol, plan) > -np.inf


def test_noise_spares_current_point():
    g = generate_scene(SceneTemplate("corridor", size=9), 0)
    a = generate_tracks(g, true_rewards(g), 3, (2.0, 3.0), 0, history=5)
    for ag in a:
        np.testing.assert_array_equal(ag.track.positions[-1], [0.0, 0.0])
        assert np.any(ag.track.positions[:-1, 1] != 0.0)


def test_terminal_distribution_matches_goal_svf():
    g = generate_scene(SceneTemplate("t-junction", size=11, offset=1), 0)
    r = true_rewards(g)
    M = 10_000
    agents = generate_tracks(g, r, M, (2.0, 5.0), 42, N=20)
    svf = propagate_inferred(solve_inferred(r, 20), g.agent_cell)
    counts = np.zeros(g.drivable.shape)
    for a in agents:
        counts[a.plan.goal] += 1
    emp = counts / M
    p = svf.goal
    assert np.all(np.abs(emp - p) <= binomial_bound(p, M) + 1e-12)


def test_kinematics_clamped():
    g = generate_scene(SceneTemplate("corridor", size=15), 0)
    for a in generate_tracks(g, true_rewards(g), 20, (2.0, 3.0), 1, accel_range=(-5.0, -4.0), noise=0.0):
        steps = np.linalg.norm(np.diff(np.vstack([[0.0, 0.0], a.future]), axis=0), axis=1)
        assert np.all(steps >= -1e-12)
        assert np.all(a.track.speed >= 0)


def test_bench_config_and_splits():
    with pytest.raises(ValueError):
        BenchConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError):
        BenchConfig.from_dict({"templates": ["maze"]})
    cfg = BenchConfig.from_dict({"train_scenes": 3, "test_scenes": 2, "agents_per_scene": 2, "templates": ["corridor", "ring"]})
    assert cfg.templates == ("corridor", "ring")
    assert BenchConfig.from_dict(cfg.to_dict()) == cfg
    assert not set(scene_seeds(cfg, "train")) & set(scene_seeds(cfg, "test"))
    a, b = make_split(cfg, "train"), make_split(cfg, "train")
    assert len(a) == 6
    assert all(x.agent.future.tobytes() == y.agent.future.tobytes() for x, y in zip(a, b))
    assert len(make_split(cfg, "test")) == 2 * cfg.test_agents_per_scene
