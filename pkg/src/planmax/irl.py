"""MaxEnt IRL on grid demonstrations with inferred goals."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from planmax.grid import FeatureGrid, Plan, SceneGrid, TrackHistory, assemble_features, rasterize_track_to_plan
from planmax.maxent import (
    MAX_ENUM_CELLS,
    MAX_ENUM_STEPS,
    SVF,
    enumerate_distribution,
    log_likelihood,
    propagate_inferred,
    solve_inferred,
)
from planmax.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Demonstration:
    plan: Plan
    features: FeatureGrid
    track: TrackHistory | None = None


def make_demonstration(grid: SceneGrid, track: TrackHistory, future, N: int | None = None):
    """Rasterize a future track (agent frame, t > 0) into a demonstration.

    Returns ``None`` (with a warning) when the plan does not fit in N steps.
    """
    pts = np.vstack([[0.0, 0.0], np.asarray(future, dtype=float)])
    plan = rasterize_track_to_plan(pts, grid)
    if N is not None and len(plan.cells) > N:
        warnings.warn(f"demonstration needs {len(plan.cells)} steps > N={N}; discarded", stacklevel=2)
        return None
    return Demonstration(plan, assemble_features(grid, track), track)


def demo_svf(plan: Plan, shape) -> SVF:
    """Visit counts of a plan; row k is the state occupied at step k+1."""
    h, w = shape
    n = len(plan.cells)
    path = np.zeros((n + 1, h * w))
    goal = np.zeros((n + 1, h * w))
    for k, (r, c) in enumerate(plan.cells):
        path[k, r * w + c] = 1.0
    goal[n, plan.goal[0] * w + plan.goal[1]] = 1.0
    return SVF(path, goal, (h, w))


def irl_gradient(demo: Demonstration, params, N: int, with_loglik: bool = False):
    """Ascent direction of log P(demo) w.r.t. the reward parameters.

    Upstream per head is the demonstration SVF minus the expected SVF.
    """
    if len(demo.plan.cells) > N:
        raise ValueError("demonstration longer than the horizon")
    r = params.forward(demo.features)
    policy = solve_inferred(r, N)
    expected = propagate_inferred(policy, demo.plan.cells[0])
    observed = demo_svf(demo.plan, r.shape)
    upstream = np.stack([observed.path - expected.path, observed.goal - expected.goal])
    grad = params.backward(demo.features, upstream)
    if with_loglik:
        return grad, log_likelihood(r, policy, demo.plan)
    return grad


def exact_loglik(demo: Demonstration, params, N: int) -> float:
    r = params.forward(demo.features)
    return log_likelihood(r, solve_inferred(r, N), demo.plan)


def oracle_loglik(demo: Demonstration, params, N: int) -> float:
    """log P(demo) from brute-force enumeration (oracle scale only)."""
    r = params.forward(demo.features)
    dist = enumerate_distribution(r, N, demo.plan.cells[0])
    p = dist.get(demo.plan, 0.0)
    return math.log(p) if p > 0 else -math.inf


def oracle_scale(shape, N: int) -> bool:
    return shape[0] * shape[1] <= MAX_ENUM_CELLS and N <= MAX_ENUM_STEPS


@dataclass
class IRLConfig:
    N: int = 50
    lr: float = 1e-4
    batch: int = 8
    epochs: int = 10
    seed: int = 0


@dataclass
class IRLResult:
    params: object
    adam: AdamState
    curve: list[dict] = field(default_factory=list)


def _mean_nll(demos, params, N, fn):
    if not demos:
        return None
    return -float(np.mean([fn(d, params, N) for d in demos]))


def train_irl(dataset, config: IRLConfig, params, heldout=(), adam: AdamState | None = None) -> IRLResult:
    """Adam ascent on the summed demonstration log-likelihood.

    ``params`` is the starting reward model (``RewardParams`` or
    ``TabularRewards``); ``adam`` resumes an earlier optimizer state.  The
    curve has one row per epoch (row 0 is the initial model) with the mean
    train NLL, the exact held-out NLL and, at oracle scale, the brute-force
    held-out NLL.
    """
    demos = []
    for d in dataset:
        if len(d.plan.cells) > config.N:
            warnings.warn("demonstration longer than the horizon; skipped", stacklevel=2)
            continue
        demos.append(d)
    if not demos:
        raise ValueError("no usable demonstrations")
    heldout = [d for d in heldout if len(d.plan.cells) <= config.N]
    if adam is None:
        adam = AdamState.zeros(params.theta.size, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    use_oracle = bool(heldout) and all(oracle_scale(d.features.shape, config.N) for d in heldout)

    def record(epoch, train_nll):
        row = {
            "epoch": epoch,
            "train_nll": train_nll,
            "heldout_nll": _mean_nll(heldout, params, config.N, exact_loglik),
            "oracle_nll": _mean_nll(heldout, params, config.N, oracle_loglik) if use_oracle else None,
        }
        curve.append(row)
        log.info("irl epoch %d train_nll=%.6f heldout=%s", epoch, train_nll, row["heldout_nll"])

    curve: list[dict] = []
    record(0, _mean_nll(demos, params, config.N, exact_loglik))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(demos))
        nll = 0.0
        for lo in range(0, len(order), config.batch):
            batch = [demos[i] for i in order[lo : lo + config.batch]]
            grad = np.zeros(params.theta.size)
            for d in batch:
                g, ll = irl_gradient(d, params, config.N, with_loglik=True)
                grad += g
                nll -= ll
            grad /= len(batch)
            if not (np.all(np.isfinite(grad)) and math.isfinite(nll)):
                raise TrainingDiverged(f"non-finite gradient or loss in epoch {epoch}")
            theta, adam = adam_step(params.theta, -grad, adam)
            params = params.with_theta(theta)
        # loss accumulated during the epoch, i.e. before each update
        record(epoch, float(nll / len(demos)))
    return IRLResult(params, adam, curve)
