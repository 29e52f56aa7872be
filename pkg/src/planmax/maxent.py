"""Soft value iteration, policy propagation and plan sampling on grid MDPs.

Two formulations share the 4-connected move set:

* inferred goals: every cell has a path state and a goal state, the ``end``
  action moves from a path state to the goal state of the same cell, and
  goal states are terminal;
* goal conditioned: a single absorbing goal cell, no ``end`` action.

Step indexing follows the recursions: ``V[n]`` is V^(n) for n = 0..N,
``Q[n-1]`` and ``pi[n-1]`` are Q^(n) and pi^(n) for n = 1..N, and SVF row
``k`` holds D^(k+1).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from planmax import kernels
from planmax.grid import GOAL, GridState, Plan

ACTIONS = ("up", "down", "left", "right", "end")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
END = 4

# oracle scale for brute-force enumeration
MAX_ENUM_CELLS = 16
MAX_ENUM_STEPS = 8


@functools.lru_cache(maxsize=64)
def neighbor_table(height: int, width: int) -> np.ndarray:
    """(S, 5) successor table; -1 marks off-grid moves, column 4 is ``end``."""
    s = np.arange(height * width)
    rows, cols = np.divmod(s, width)
    table = np.empty((height * width, 5), dtype=np.int64)
    for a, (dr, dc) in enumerate(MOVES):
        r, c = rows + dr, cols + dc
        ok = (r >= 0) & (r < height) & (c >= 0) & (c < width)
        table[:, a] = np.where(ok, r * width + c, -1)
    table[:, END] = s
    table.setflags(write=False)
    return table


def _cell(state, width: int) -> int:
    if isinstance(state, GridState):
        r, c = state.row, state.col
    else:
        r, c = state
    return int(r) * width + int(c)


def _check_cell(state, shape) -> tuple[int, int]:
    r, c = (state.row, state.col) if isinstance(state, GridState) else state
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise ValueError(f"state {(r, c)} outside the {shape[0]}x{shape[1]} grid")
    return int(r), int(c)


@dataclass(frozen=True, eq=False)
class RewardGrids:
    """Per-cell path and goal rewards, all in [-inf, 0]."""

    path: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        p = np.array(self.path, dtype=float)
        g = np.array(self.goal, dtype=float)
        if p.ndim != 2 or p.shape != g.shape:
            raise ValueError("path and goal rewards must be matching 2-D grids")
        for a in (p, g):
            if np.any(np.isnan(a)) or np.any(a > 0):
                raise ValueError("rewards must be <= 0 (finite or -inf)")
            a.setflags(write=False)
        object.__setattr__(self, "path", p)
        object.__setattr__(self, "goal", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.path.shape


@dataclass(frozen=True, eq=False)
class Policy:
    """Non-stationary soft-optimal policy with its log-partition tables."""

    V: np.ndarray
    Q: np.ndarray
    pi: np.ndarray
    shape: tuple[int, int]
    goal: tuple[int, int] | None = None

    @property
    def N(self) -> int:
        return self.pi.shape[0]

    @property
    def n_actions(self) -> int:
        return self.pi.shape[2]

    def probs(self, n: int, row: int, col: int) -> np.ndarray:
        """pi^(n)(. | path state at (row, col)) for n in 1..N."""
        return self.pi[n - 1, row * self.shape[1] + col]

    def log_partition(self, state) -> float:
        return float(self.V[0, _cell(state, self.shape[1])])

    def to_json(self) -> dict:
        h, w = self.shape
        return {
            "height": h,
            "width": w,
            "steps": self.N,
            "actions": list(ACTIONS[: self.n_actions]),
            "goal": None if self.goal is None else list(self.goal),
            "V": [[_num(v) for v in row] for row in self.V],
            "pi": self.pi.reshape(self.N, -1).tolist(),
        }


@dataclass(frozen=True, eq=False)
class SVF:
    """Per-step and accumulated state visitation frequencies."""

    path_steps: np.ndarray
    goal_steps: np.ndarray
    shape: tuple[int, int]

    @property
    def path(self) -> np.ndarray:
        return self.path_steps.sum(axis=0).reshape(self.shape)

    @property
    def goal(self) -> np.ndarray:
        return self.goal_steps.sum(axis=0).reshape(self.shape)

    def to_json(self) -> dict:
        h, w = self.shape
        return {
            "height": h,
            "width": w,
            "steps": self.path_steps.shape[0],
            "path_steps": self.path_steps.tolist(),
            "goal_steps": self.goal_steps.tolist(),
            "path": self.path.tolist(),
            "goal": self.goal.tolist(),
        }


def _num(v: float):
    return v if math.isfinite(v) else ("-inf" if v < 0 else "inf")


def solve_inferred(r: RewardGrids, N: int) -> Policy:
    """Soft value iteration with inferred goals (terminal goal states, ``end`` action)."""
    if N < 1:
        raise ValueError("horizon N must be >= 1; no goal is reachable in zero steps")
    h, w = r.shape
    V, Q, pi = kernels.solve_inferred(
        np.ascontiguousarray(r.path.ravel()),
        np.ascontiguousarray(r.goal.ravel()),
        neighbor_table(h, w),
        int(N),
    )
    return Policy(V, Q, pi, (h, w))


def solve_goal_conditioned(r_path, s_goal, N: int) -> Policy:
    """Soft value iteration towards a single absorbing goal cell (value pinned at 0)."""
    if N < 1:
        raise ValueError("horizon N must be >= 1")
    r_path = np.asarray(r_path.path if isinstance(r_path, RewardGrids) else r_path, dtype=float)
    h, w = r_path.shape
    goal = _check_cell(s_goal, (h, w))
    V, Q, pi = kernels.solve_goal(
        np.ascontiguousarray(r_path.ravel()), neighbor_table(h, w), goal[0] * w + goal[1], int(N)
    )
    return Policy(V, Q, pi, (h, w), goal)


def propagate_inferred(policy: Policy, s_init) -> SVF:
    """Forward SVFs; goal-state mass is accumulated and never propagated."""
    if policy.n_actions != 5:
        raise ValueError("inferred-goal propagation needs a 5-action policy")
    h, w = policy.shape
    _check_cell(s_init, policy.shape)
    Dp, Dg = kernels.propagate_inferred(
        np.ascontiguousarray(policy.pi), neighbor_table(h, w), _cell(s_init, w)
    )
    return SVF(Dp, Dg, policy.shape)


def propagate_goal_conditioned(policy: Policy, s_init, s_goal=None) -> SVF:
    """Forward SVFs with the goal absorbing (its SVF zeroed at every step)."""
    h, w = policy.shape
    s_goal = policy.goal if s_goal is None else s_goal
    if s_goal is None:
        raise ValueError("no goal state given")
    _check_cell(s_init, policy.shape)
    goal = _check_cell(s_goal, policy.shape)
    pi = np.ascontiguousarray(policy.pi[:, :, :4])
    Dp = kernels.propagate_goal(pi, neighbor_table(h, w), _cell(s_init, w), goal[0] * w + goal[1])
    return SVF(Dp, np.zeros_like(Dp), policy.shape)


def sample_plan_arrays(policy: Policy, s_init, M: int, rng: np.random.Generator):
    """Sample M plans as (M, N) flat path-state indices (-1 padded) and lengths."""
    if policy.n_actions != 5:
        raise ValueError("plans are sampled from inferred-goal policies")
    h, w = policy.shape
    s0 = _cell(s_init, w)
    if not policy.V[0, s0] > -np.inf:
        raise ValueError("no plan from the initial state has positive probability")
    uniforms = rng.random((int(M), policy.N))
    return kernels.sample_plans(np.ascontiguousarray(policy.pi), neighbor_table(h, w), s0, uniforms)


def arrays_to_plans(cells: np.ndarray, lengths: np.ndarray, width: int) -> list[Plan]:
    out = []
    for row, n in zip(cells, lengths):
        r, c = np.divmod(row[:n], width)
        out.append(Plan(tuple(zip(r.tolist(), c.tolist()))))
    return out


def sample_plans(policy: Policy, s_init, M: int, seed) -> list[Plan]:
    """Ancestral sampling of M plans; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    cells, lengths = sample_plan_arrays(policy, s_init, M, rng)
    return arrays_to_plans(cells, lengths, policy.shape[1])


def plan_actions(plan: Plan) -> list[int]:
    acts = []
    for (r0, c0), (r1, c1) in zip(plan.cells, plan.cells[1:]):
        acts.append(MOVES.index((r1 - r0, c1 - c0)))
    acts.append(END)
    return acts


def plan_log_prob(policy: Policy, plan: Plan) -> float:
    """log of the product of pi along the plan (-inf if it is infeasible)."""
    h, w = policy.shape
    if len(plan.cells) > policy.N or not plan.in_grid(h, w):
        return -math.inf
    total = 0.0
    for n, ((r, c), a) in enumerate(zip(plan.cells, plan_actions(plan))):
        p = policy.pi[n, r * w + c, a]
        if p <= 0.0:
            return -math.inf
        total += math.log(p)
    return total


def plan_reward(r: RewardGrids, plan: Plan) -> float:
    """Cumulative reward: path reward per visit plus the goal reward once."""
    total = 0.0
    for rr, cc in plan.cells:
        total += r.path[rr, cc]
    return total + r.goal[plan.goal]


def iter_plans(shape, N: int, s_init) -> Iterator[Plan]:
    """Every plan from ``s_init`` that reaches a goal within N steps."""
    h, w = shape
    start = _check_cell(s_init, shape)

    def walk(prefix):
        yield Plan(tuple(prefix))
        if len(prefix) == N:
            return
        r, c = prefix[-1]
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w:
                prefix.append((nr, nc))
                yield from walk(prefix)
                prefix.pop()

    yield from walk([start])


def enumerate_distribution(r: RewardGrids, N: int, s_init) -> dict[Plan, float]:
    """Brute-force MaxEnt plan distribution, P(plan) proportional to exp(reward)."""
    h, w = r.shape
    if h * w > MAX_ENUM_CELLS or N > MAX_ENUM_STEPS:
        raise ValueError(
            f"enumeration limited to {MAX_ENUM_CELLS} cells and N <= {MAX_ENUM_STEPS}"
        )
    plans = list(iter_plans(r.shape, N, s_init))
    logw = np.array([plan_reward(r, p) for p in plans])
    m = logw.max()
    if m == -np.inf:
        raise ValueError("every plan has zero probability")
    log_z = m + math.log(np.exp(logw - m).sum())
    return {p: math.exp(lw - log_z) for p, lw in zip(plans, logw)}


def log_likelihood(r: RewardGrids, policy: Policy, plan: Plan, s_init=None) -> float:
    """Exact log P(plan) via the partition function ``V^(0)(s_init)``."""
    s_init = plan.cells[0] if s_init is None else s_init
    return plan_reward(r, plan) - policy.log_partition(s_init)


__all__ = [
    "ACTIONS",
    "END",
    "GOAL",
    "Policy",
    "RewardGrids",
    "SVF",
    "enumerate_distribution",
    "log_likelihood",
    "neighbor_table",
    "plan_log_prob",
    "plan_reward",
    "propagate_goal_conditioned",
    "propagate_inferred",
    "sample_plan_arrays",
    "sample_plans",
    "solve_goal_conditioned",
    "solve_inferred",
]
