import math
import warnings

import numpy as np
import pytest

from oracles import central_diff, random_features, rel_err
from planmax.grid import Plan
from planmax.irl import (
    Demonstration,
    IRLConfig,
    TrainingDiverged,
    demo_svf,
    exact_loglik,
    irl_gradient,
    make_demonstration,
    oracle_loglik,
    train_irl,
)
from planmax.maxent import RewardGrids, propagate_inferred, sample_plans, solve_inferred
from planmax.optim import AdamState, adam_step
from planmax.reward import RewardParams, TabularRewards, backward_rewards, forward_rewards


def random_params(rng, d=5, hidden=32, scale=0.5):
    p = RewardParams.init(d, int(rng.integers(1 << 30)), hidden)
    return p.with_theta(p.theta + rng.normal(scale=scale, size=p.theta.size))


# -- reward model ------------------------------------------------------------


def test_zero_params_give_minus_log2(rng):
    f = random_features(rng, 4, 3)
    p = RewardParams(np.zeros(RewardParams.init(5, 0).theta.size), 5)
    r = forward_rewards(f, p)
    np.testing.assert_array_equal(r.path, np.full((4, 3), -math.log(2)))
    np.testing.assert_array_equal(r.goal, np.full((4, 3), -math.log(2)))
    # the seeded init has zero output layers
    r = forward_rewards(f, RewardParams.init(5, 3))
    np.testing.assert_array_equal(r.goal, np.full((4, 3), -math.log(2)))


def test_saturated_output():
    p = RewardParams.init(5, 0)
    theta = np.zeros(p.theta.size)
    theta[p.layout.slice("goal.b2")] = 10.0
    r = forward_rewards(np.zeros((1, 1, 5)), p.with_theta(theta))
    assert r.goal[0, 0] == pytest.approx(-4.5398899e-5, rel=1e-7)
    assert r.goal[0, 0] == pytest.approx(math.log(1 / (1 + math.exp(-10))), rel=1e-12)


def test_dimension_checked(rng):
    with pytest.raises(ValueError):
        forward_rewards(random_features(rng, 2, 2, 7), RewardParams.init(5, 0))
    with pytest.raises(ValueError):
        RewardParams(np.zeros(3), 5)
    with pytest.raises(ValueError):
        backward_rewards(random_features(rng, 2, 2), RewardParams.init(5, 0), np.zeros((2, 3, 2)))


def test_locality_and_permutation(rng):
    p = random_params(rng)
    f = random_features(rng, 3, 4).values.copy()
    base = forward_rewards(f, p)
    g = f.copy()
    g[1, 2] = rng.normal(size=5)
    changed = forward_rewards(g, p)
    mask = np.ones((3, 4), bool)
    mask[1, 2] = False
    np.testing.assert_array_equal(changed.path[mask], base.path[mask])
    np.testing.assert_array_equal(changed.goal[mask], base.goal[mask])
    g = f.copy()
    g[0, 0], g[2, 3] = f[2, 3], f[0, 0]
    swapped = forward_rewards(g, p)
    assert swapped.path[0, 0] == base.path[2, 3] and swapped.goal[2, 3] == base.goal[0, 0]


def test_outputs_negative_finite(rng):
    for _ in range(20):
        r = forward_rewards(random_features(rng, 3, 3), random_params(rng, scale=3.0))
        for a in (r.path, r.goal):
            assert np.all(np.isfinite(a)) and np.all(a < 0)


def test_backward_zero_and_linear(rng):
    p = random_params(rng)
    f = random_features(rng, 3, 3)
    assert not np.any(backward_rewards(f, p, np.zeros((2, 3, 3))))
    u1, u2 = rng.normal(size=(2, 2, 3, 3))
    np.testing.assert_allclose(
        backward_rewards(f, p, 2 * u1 - u2),
        2 * backward_rewards(f, p, u1) - backward_rewards(f, p, u2),
        atol=1e-12,
    )


def test_single_upstream_is_jacobian_row(rng):
    p = random_params(rng)
    f = random_features(rng, 2, 3)
    up = np.zeros((2, 2, 3))
    up[1, 1, 0] = 1.0
    g = backward_rewards(f, p, up)
    fd = central_diff(lambda t: forward_rewards(f, p.with_theta(t)).goal[1, 0], p.theta)
    assert rel_err(g, fd) < 1e-6


def test_reward_gradient_fd_many(rng):
    worst = 0.0
    for _ in range(100):
        p = random_params(rng, hidden=6)
        f = random_features(rng, 2, 2)
        up = rng.normal(size=(2, 2, 2))

        def loss(t):
            r = forward_rewards(f, p.with_theta(t))
            return float((up[0] * r.path).sum() + (up[1] * r.goal).sum())

        worst = max(worst, rel_err(backward_rewards(f, p, up), central_diff(loss, p.theta)))
    assert worst < 1e-6


def test_reward_checkpoint_round_trip(rng):
    import json

    p = random_params(rng)
    q = RewardParams.from_json(json.loads(json.dumps(p.to_json())))
    assert q.theta.tobytes() == p.theta.tobytes()
    assert p.to_json()["order"][0] == "path.w1[32, 5]"
    with pytest.raises(ValueError):
        RewardParams.from_json({"kind": "bc-mlp"})


# -- demonstrations ---------------------------------------------------------


def test_demo_svf_counts():
    s = demo_svf(Plan(((0, 0),)), (2, 2))
    assert s.path[0, 0] == 1 and s.goal[0, 0] == 1
    assert s.path.sum() == 1 and s.goal.sum() == 1
    s = demo_svf(Plan(((0, 0), (0, 1), (0, 0), (1, 0))), (2, 2))
    assert s.path[0, 0] == 2
    assert s.path.sum() + 1 == 5


def test_demo_svf_length_identity(rng):
    for _ in range(20):
        cells = [(2, 2)]
        for _ in range(int(rng.integers(0, 10))):
            r, c = cells[-1]
            dr, dc = [(-1, 0), (1, 0), (0, -1), (0, 1)][rng.integers(4)]
            cells.append((min(max(r + dr, 0), 4), min(max(c + dc, 0), 4)))
        dedup = [cells[0]] + [b for a, b in zip(cells, cells[1:]) if a != b]
        plan = Plan(tuple(dedup))
        s = demo_svf(plan, (5, 5))
        assert s.path.sum() + 1 == len(plan)


def test_make_demonstration_discards_long(rng):
    from planmax.grid import SceneGrid, TrackHistory

    g = SceneGrid(np.zeros((1, 9, 9)), np.ones((9, 9)))
    hist = TrackHistory([0.0], [[0.0, 0.0]], [1.0], [0.0], [0.0])
    future = [[float(k), 0.0] for k in range(1, 5)]
    assert make_demonstration(g, hist, future, N=5).plan.cells[-1] == (0, 4)
    with pytest.warns(UserWarning):
        assert make_demonstration(g, hist, future, N=3) is None


def small_instance(rng):
    h, w = (int(x) for x in rng.integers(2, 4, 2))
    N = int(rng.integers(2, 6))
    f = random_features(rng, h, w)
    p = random_params(rng, hidden=4, scale=0.8)
    pol = solve_inferred(p.forward(f), N)
    s0 = (int(rng.integers(h)), int(rng.integers(w)))
    plan = sample_plans(pol, s0, 1, int(rng.integers(1 << 30)))[0]
    return Demonstration(plan, f), p, N


def test_irl_gradient_matches_fd(rng):
    for _ in range(25):
        demo, p, N = small_instance(rng)
        g = irl_gradient(demo, p, N)
        fd = central_diff(lambda t: oracle_loglik(demo, p.with_theta(t), N), p.theta)
        assert rel_err(g, fd) < 1e-5


def test_exact_and_oracle_loglik_agree(rng):
    for _ in range(10):
        demo, p, N = small_instance(rng)
        assert exact_loglik(demo, p, N) == pytest.approx(oracle_loglik(demo, p, N), abs=1e-10)


def test_gradient_zero_at_fixed_point():
    # a 1x1 grid admits a single plan, so D_demo = D_theta
    p = RewardParams.init(5, 0)
    f = random_features(np.random.default_rng(0), 1, 1)
    assert not np.any(np.abs(irl_gradient(Demonstration(Plan(((0, 0),)), f), p, 3)) > 1e-15)


def test_duplicated_demo_doubles_gradient(rng):
    demo, p, N = small_instance(rng)
    g = irl_gradient(demo, p, N)
    total = sum(irl_gradient(d, p, N) for d in (demo, demo))
    np.testing.assert_allclose(total, 2 * g, rtol=0, atol=0)


def test_gradient_rejects_long_demo(rng):
    demo, p, N = small_instance(rng)
    with pytest.raises(ValueError):
        irl_gradient(Demonstration(Plan(((0, 0), (0, 1), (0, 0), (0, 1))), random_features(rng, 2, 2)), p, 2)


# -- training ----------------------------------------------------------------


def test_zero_epochs_returns_initial(rng):
    demo, p, N = small_instance(rng)
    res = train_irl([demo], IRLConfig(N=N, epochs=0), p)
    assert res.params.theta.tobytes() == p.theta.tobytes()
    assert len(res.curve) == 1 and res.curve[0]["epoch"] == 0


def true_demos(rng, n, shape=(3, 3), N=5):
    truth = RewardGrids(np.full(shape, -1.0), np.where(np.arange(shape[1]) == shape[1] - 1, -0.1, -3.0) * np.ones(shape))
    pol = solve_inferred(truth, N)
    f = random_features(rng, *shape)
    # features that make the goal column identifiable
    vals = f.values.copy()
    vals[..., 0] = np.arange(shape[1])[None, :]
    from planmax.grid import FeatureGrid

    f = FeatureGrid(vals, 1, np.zeros((0, 3)))
    plans = sample_plans(pol, (1, 0), n, 17)
    return [Demonstration(p, f) for p in plans]


def test_heldout_loglik_improves(rng):
    demos = true_demos(rng, 250)
    p = RewardParams.init(5, 1)
    res = train_irl(demos[:200], IRLConfig(N=5, lr=1e-2, epochs=10, batch=20, seed=0), p, heldout=demos[200:])
    curve = res.curve
    assert len(curve) == 11
    assert curve[-1]["oracle_nll"] < curve[0]["oracle_nll"]
    assert curve[-1]["heldout_nll"] == pytest.approx(curve[-1]["oracle_nll"], abs=1e-9)


def test_training_deterministic(rng):
    demos = true_demos(rng, 12)
    cfg = IRLConfig(N=5, lr=1e-2, epochs=2, batch=4, seed=3)
    a = train_irl(demos, cfg, RewardParams.init(5, 1))
    b = train_irl(demos, cfg, RewardParams.init(5, 1))
    assert a.params.theta.tobytes() == b.params.theta.tobytes()
    assert a.curve == b.curve


def test_tabular_single_demo_converges():
    shape, N = (3, 3), 5
    plan = Plan(((1, 1), (0, 1), (0, 2)))
    demo = Demonstration(plan, random_features(np.random.default_rng(0), *shape))
    observed = demo_svf(plan, shape)

    def gap(params):
        pol = solve_inferred(params.forward(), N)
        d = propagate_inferred(pol, (1, 1))
        return np.abs(d.path - observed.path).sum() + np.abs(d.goal - observed.goal).sum()

    p = TabularRewards.zeros(shape)
    before = gap(p)
    res = train_irl([demo], IRLConfig(N=N, lr=0.1, epochs=200, batch=1), p)
    assert gap(res.params) * 10 <= before


def test_divergence_detected(rng):
    class Bad(TabularRewards):
        def backward(self, features, upstream):
            return np.full(self.theta.size, np.nan)

        def with_theta(self, theta):
            return Bad(theta, self.shape)

    demo = Demonstration(Plan(((0, 0),)), random_features(rng, 2, 2))
    with pytest.raises(TrainingDiverged):
        train_irl([demo], IRLConfig(N=2, epochs=1), Bad.zeros((2, 2)).with_theta(np.zeros(8)))


def test_long_demos_skipped(rng):
    demo, p, N = small_instance(rng)
    long = Demonstration(Plan(((0, 0), (0, 1), (0, 0), (0, 1), (0, 0), (0, 1), (0, 0))), random_features(rng, 2, 2))
    with pytest.warns(UserWarning):
        with pytest.raises(ValueError):
            train_irl([long], IRLConfig(N=3), p)


# -- optimizer ---------------------------------------------------------------


def test_adam_zero_grad():
    theta = np.array([1.0, -2.0])
    new, st = adam_step(theta, np.zeros(2), AdamState.zeros(2))
    np.testing.assert_array_equal(new, theta)
    assert st.step == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    theta = np.zeros(3)
    new, _ = adam_step(theta, g, AdamState.zeros(3, lr=1e-4))
    expect = -1e-4 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expect, rtol=1e-12)
    np.testing.assert_allclose(new, -1e-4 * np.sign(g), rtol=1e-4)
    big, _ = adam_step(theta, 10 * g, AdamState.zeros(3, lr=1e-4))
    np.testing.assert_array_equal(np.sign(big), np.sign(new))
    np.testing.assert_allclose(big, new, rtol=1e-4)


def test_adam_state_round_trip():
    _, st = adam_step(np.zeros(2), np.array([1.0, 2.0]), AdamState.zeros(2))
    back = AdamState.from_json(st.to_json())
    assert back.m.tobytes() == st.m.tobytes() and back.step == 1
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(3), st)
