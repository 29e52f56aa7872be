import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planmax.grid import Plan
from planmax.maxent import (
    END,
    RewardGrids,
    enumerate_distribution,
    iter_plans,
    log_likelihood,
    neighbor_table,
    plan_log_prob,
    propagate_goal_conditioned,
    propagate_inferred,
    sample_plan_arrays,
    sample_plans,
    solve_goal_conditioned,
    solve_inferred,
)


def random_rewards(rng, h, w, lo=-3.0):
    return RewardGrids(rng.uniform(lo, 0, (h, w)), rng.uniform(lo, 0, (h, w)))


def test_rewards_validated():
    with pytest.raises(ValueError):
        RewardGrids(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        RewardGrids(np.full((2, 2), np.nan), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        RewardGrids(np.zeros((2, 2)), np.zeros((2, 3)))
    RewardGrids(np.full((1, 1), -np.inf), np.zeros((1, 1)))


def test_neighbor_table():
    t = neighbor_table(2, 3)
    # cell 0 = (0, 0): up/left off-grid, down = 3, right = 1
    assert t[0].tolist() == [-1, 3, -1, 1, 0]
    assert t[5].tolist() == [2, -1, 4, -1, 5]


def test_single_cell(backend):
    r = RewardGrids([[-1.0]], [[-2.0]])
    pol = solve_inferred(r, 1)
    assert pol.Q[0, 0, END] == -3.0
    assert pol.V[0, 0] == -3.0
    assert np.all(np.isneginf(pol.Q[0, 0, :4]))
    assert pol.probs(1, 0, 0).tolist() == [0, 0, 0, 0, 1]
    svf = propagate_inferred(pol, (0, 0))
    assert svf.goal[0, 0] == 1.0


def test_horizon_must_be_positive():
    with pytest.raises(ValueError):
        solve_inferred(RewardGrids([[0.0]], [[0.0]]), 0)


def test_one_by_two_first_step(backend):
    # plans from the left cell within 2 steps: [L] and [L, R], both reward 0
    r = RewardGrids(np.zeros((1, 2)), np.zeros((1, 2)))
    pol = solve_inferred(r, 2)
    dist = enumerate_distribution(r, 2, (0, 0))
    p_end = dist[Plan(((0, 0),))]
    p = pol.probs(1, 0, 0)
    assert p[END] == pytest.approx(p_end, abs=1e-12) == pytest.approx(0.5)
    assert p[3] == pytest.approx(1 - p_end, abs=1e-12)
    assert p[0] == p[1] == p[2] == 0.0
    # second step from the right cell can only end
    assert pol.probs(2, 0, 1)[END] == 1.0


def test_mirror_symmetry(backend, rng):
    r = random_rewards(rng, 3, 4)
    mirrored = RewardGrids(r.path[:, ::-1], r.goal[:, ::-1])
    a = solve_inferred(r, 5)
    b = solve_inferred(mirrored, 5)
    pa = a.pi.reshape(5, 3, 4, 5)
    pb = b.pi.reshape(5, 3, 4, 5)[:, :, ::-1][..., [0, 1, 3, 2, 4]]
    np.testing.assert_array_equal(pa, pb)


def test_policy_normalized_and_unreachable(backend, rng):
    path = rng.uniform(-2, 0, (3, 3))
    path[1, 1] = -np.inf
    r = RewardGrids(path, np.full((3, 3), -np.inf))
    r = RewardGrids(path, np.where(np.eye(3, dtype=bool), -1.0, -np.inf))
    pol = solve_inferred(r, 4)
    for n in range(pol.N):
        for s in range(9):
            p = pol.pi[n, s]
            assert np.all((p >= 0) & (p <= 1))
            if pol.V[n, s] > -np.inf:
                assert p.sum() == pytest.approx(1.0, abs=1e-9)
            else:
                assert np.all(p == 0)


@pytest.mark.parametrize("seed", range(10))
def test_plan_probabilities_match_enumeration(backend, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 4, 2)
    N = int(rng.integers(1, 6))
    r = random_rewards(rng, h, w)
    s0 = (int(rng.integers(h)), int(rng.integers(w)))
    pol = solve_inferred(r, N)
    dist = enumerate_distribution(r, N, s0)
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
    for plan, p in dist.items():
        assert math.exp(plan_log_prob(pol, plan)) == pytest.approx(p, abs=1e-9)
        assert math.exp(log_likelihood(r, pol, plan)) == pytest.approx(p, abs=1e-9)


def test_enumeration_examples():
    # single feasible plan
    d = enumerate_distribution(RewardGrids([[-1.0]], [[-1.0]]), 3, (0, 0))
    assert d == {Plan(((0, 0),)): 1.0}
    # rewards -1 and -2: softmax
    r = RewardGrids(np.zeros((1, 2)), np.array([[-1.0, -2.0]]))
    d = enumerate_distribution(r, 2, (0, 0))
    e1, e2 = math.exp(-1), math.exp(-2)
    assert d[Plan(((0, 0),))] == pytest.approx(e1 / (e1 + e2), abs=1e-15)
    assert d[Plan(((0, 0), (0, 1)))] == pytest.approx(e2 / (e1 + e2), abs=1e-15)
    assert d[Plan(((0, 0),))] == pytest.approx(0.7311, abs=1e-4)
    with pytest.raises(ValueError):
        enumerate_distribution(RewardGrids(np.zeros((5, 5)), np.zeros((5, 5))), 3, (0, 0))
    with pytest.raises(ValueError):
        enumerate_distribution(RewardGrids(np.zeros((2, 2)), np.zeros((2, 2))), 9, (0, 0))


def test_iter_plans_counts():
    # 1x2, N=3 from the left: L, LR, LRL
    assert len(list(iter_plans((1, 2), 3, (0, 0)))) == 3


# -- goal conditioned ------------------------------------------------------


def goal_paths(shape, N, s0, goal):
    """Oracle: walks from s0 first reaching ``goal`` within N moves."""
    h, w = shape

    def walk(prefix):
        if prefix[-1] == goal:
            yield list(prefix)
            return
        if len(prefix) - 1 == N:
            return
        r, c = prefix[-1]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w:
                yield from walk(prefix + [(nr, nc)])

    return list(walk([s0]))


def goal_distribution(r_path, N, s0, goal):
    paths = goal_paths(r_path.shape, N, s0, goal)
    logw = np.array([sum(r_path[c] for c in p[:-1]) for p in paths])
    z = np.logaddexp.reduce(logw)
    return paths, np.exp(logw - z)


def goal_path_prob(pol, path):
    w = pol.shape[1]
    p = 1.0
    for n, (a, b) in enumerate(zip(path, path[1:])):
        act = [(-1, 0), (1, 0), (0, -1), (0, 1)].index((b[0] - a[0], b[1] - a[1]))
        p *= pol.pi[n, a[0] * w + a[1], act]
    return p


def test_goal_adjacent_forced_move(backend):
    pol = solve_goal_conditioned(np.full((1, 3), -1.0), (0, 1), 1)
    assert pol.probs(1, 0, 0)[:4].tolist() == [0, 0, 0, 1]
    assert pol.probs(1, 0, 2)[:4].tolist() == [0, 0, 1, 0]


def test_goal_two_by_two_symmetry(backend):
    pol = solve_goal_conditioned(np.full((2, 2), -1.0), (1, 1), 3)
    p = pol.probs(1, 0, 0)
    assert p[1] == pytest.approx(p[3], abs=1e-15)
    assert p[1] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_goal_policy_matches_enumeration(backend, seed):
    rng = np.random.default_rng(seed)
    r = rng.uniform(-3, 0, (3, 3))
    pol = solve_goal_conditioned(r, (2, 2), 4)
    paths, probs = goal_distribution(r, 4, (0, 0), (2, 2))
    for path, p in zip(paths, probs):
        assert goal_path_prob(pol, path) == pytest.approx(p, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_goal_propagation_matches_enumeration(backend, seed):
    rng = np.random.default_rng(seed)
    r = rng.uniform(-2, 0, (2, 3))
    goal, s0, N = (1, 2), (0, 0), 6
    pol = solve_goal_conditioned(r, goal, N)
    svf = propagate_goal_conditioned(pol, s0)
    paths, probs = goal_distribution(r, N, s0, goal)
    expect = np.zeros((2, 3))
    for path, p in zip(paths, probs):
        for c in path[:-1]:
            expect[c] += p
    np.testing.assert_allclose(svf.path, expect, atol=1e-12)
    assert svf.path[goal] == 0.0


def test_goal_corridor_absorbs(backend):
    pol = solve_goal_conditioned(np.full((1, 4), -1.0), (0, 3), 3)
    svf = propagate_goal_conditioned(pol, (0, 0))
    np.testing.assert_allclose(svf.path, [[1.0, 1.0, 1.0, 0.0]], atol=1e-15)
    with pytest.raises(ValueError):
        solve_goal_conditioned(np.zeros((2, 2)), (2, 0), 2)


# -- propagation ---------------------------------------------------------------


def test_corridor_spike(backend):
    # a 1x4 corridor where only the far end can be a goal
    goal = np.array([[-np.inf, -np.inf, -np.inf, 0.0]])
    pol = solve_inferred(RewardGrids(np.full((1, 4), -1.0), goal), 4)
    svf = propagate_inferred(pol, (0, 0))
    for k in range(4):
        expect = np.zeros(4)
        expect[k] = 1.0
        np.testing.assert_allclose(svf.path_steps[k], expect, atol=1e-15)
    assert svf.goal[0, 3] == pytest.approx(1.0, abs=1e-15)


def test_mass_conservation_large(backend, rng):
    r = random_rewards(rng, 25, 25, lo=-5.0)
    pol = solve_inferred(r, 50)
    svf = propagate_inferred(pol, (12, 12))
    p = svf.path_steps.sum(axis=1)
    g = svf.goal_steps.sum(axis=1)
    np.testing.assert_allclose(p[1:] + g[1:], p[:-1], atol=1e-12)
    assert svf.goal_steps.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(svf.path_steps >= 0) and np.all(svf.goal_steps >= 0)
    np.testing.assert_allclose(svf.path, svf.path_steps.sum(0).reshape(25, 25), atol=1e-12)


def test_propagation_monte_carlo(backend):
    rng = np.random.default_rng(7)
    r = random_rewards(rng, 3, 3, lo=-1.5)
    N, M = 5, 100_000
    pol = solve_inferred(r, N)
    svf = propagate_inferred(pol, (1, 1))
    cells, lengths = sample_plan_arrays(pol, (1, 1), M, np.random.default_rng(11))
    emp = np.zeros((N, 9))
    for n in range(N):
        col = cells[:, n]
        emp[n] = np.bincount(col[col >= 0], minlength=9) / M
    p = svf.path_steps[:N]
    bound = 3 * np.sqrt(p * (1 - p) / M) + 1e-12
    assert np.all(np.abs(emp - p) <= bound)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 2.0))
def test_goal_reward_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    r = random_rewards(rng, 3, 3)
    cell = (int(rng.integers(3)), int(rng.integers(3)))
    before = propagate_inferred(solve_inferred(r, 4), (1, 1)).goal[cell]
    goal = r.goal.copy()
    goal[cell] = min(goal[cell] + bump, 0.0)
    after = propagate_inferred(solve_inferred(RewardGrids(r.path, goal), 4), (1, 1)).goal[cell]
    assert after >= before - 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_no_nan_extreme_rewards(seed):
    rng = np.random.default_rng(seed)
    choices = np.array([-np.inf, -1e300, -1e6, -700.0, -1e-300, 0.0])
    path = rng.choice(choices, (3, 4))
    goal = rng.choice(choices, (3, 4))
    pol = solve_inferred(RewardGrids(path, goal), 6)
    assert not np.any(np.isnan(pol.V))
    assert not np.any(np.isnan(pol.Q))
    assert not np.any(np.isnan(pol.pi))
    if np.isfinite(pol.V[0, 5]):
        svf = propagate_inferred(pol, (1, 1))
        assert not np.any(np.isnan(svf.path_steps))


# -- sampling --------------------------------------------------------------


def test_deterministic_policy_samples_identical(backend):
    goal = np.array([[-np.inf, -np.inf, 0.0]])
    pol = solve_inferred(RewardGrids(np.zeros((1, 3)), goal), 3)
    plans = sample_plans(pol, (0, 0), 50, seed=3)
    assert set(plans) == {Plan(((0, 0), (0, 1), (0, 2)))}


def test_sampling_seeded(backend, rng):
    pol = solve_inferred(random_rewards(rng, 4, 4), 6)
    a = sample_plan_arrays(pol, (2, 2), 200, np.random.default_rng(5))
    b = sample_plan_arrays(pol, (2, 2), 200, np.random.default_rng(5))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert all(len(p.cells) <= 6 for p in sample_plans(pol, (2, 2), 100, 1))


def test_one_by_two_sampling_frequencies(backend):
    r = RewardGrids(np.zeros((1, 2)), np.zeros((1, 2)))
    pol = solve_inferred(r, 2)
    M = 100_000
    cells, lengths = sample_plan_arrays(pol, (0, 0), M, np.random.default_rng(0))
    frac = np.mean(lengths == 1)
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / M)


def test_backends_agree(rng):
    from planmax import kernels

    if "cython" not in kernels.available_backends():
        pytest.skip("compiled kernels not built")
    r = random_rewards(rng, 7, 6)
    out = {}
    for b in ("python", "cython"):
        kernels.use_backend(b)
        pol = solve_inferred(r, 9)
        svf = propagate_inferred(pol, (3, 3))
        gp = solve_goal_conditioned(r.path, (0, 0), 9)
        gs = propagate_goal_conditioned(gp, (3, 3))
        samples = sample_plan_arrays(pol, (3, 3), 500, np.random.default_rng(2))
        out[b] = (pol.V, pol.pi, svf.path_steps, svf.goal_steps, gp.pi, gs.path_steps, *samples)
    kernels.use_backend("cython")
    for x, y in zip(out["python"], out["cython"]):
        if x.dtype.kind == "f":
            np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-15)
        else:
            np.testing.assert_array_equal(x, y)


def test_json_exports(rng):
    r = random_rewards(rng, 2, 2)
    pol = solve_inferred(r, 2)
    d = json.loads(json.dumps(pol.to_json()))
    assert d["steps"] == 2 and d["actions"][-1] == "end"
    assert d["V"][-1] == ["-inf"] * 4
    s = propagate_inferred(pol, (0, 0)).to_json()
    assert sum(sum(row) for row in s["goal"]) == pytest.approx(1.0)


def test_infeasible_start_rejected():
    r = RewardGrids(np.zeros((1, 2)), np.full((1, 2), -np.inf))
    pol = solve_inferred(r, 2)
    with pytest.raises(ValueError):
        sample_plan_arrays(pol, (0, 0), 3, np.random.default_rng(0))


def test_all_plans_have_positive_probability_when_rewards_finite(rng):
    r = random_rewards(rng, 2, 2)
    pol = solve_inferred(r, 3)
    for plan in iter_plans((2, 2), 3, (0, 0)):
        assert plan_log_prob(pol, plan) > -np.inf
    too_long = Plan(tuple(itertools.islice(itertools.cycle([(0, 0), (0, 1)]), 4)))
    assert plan_log_prob(pol, too_long) == -np.inf
