"""Bounded path and goal rewards from per-cell features.

Each head is a per-cell MLP (a pair of 1x1 convolutions) with a ReLU hidden
layer and a log-sigmoid output, so rewards lie in (-inf, 0).

Flat parameter order: ``path.w1 (H, D), path.b1 (H), path.w2 (1, H),
path.b2 (1), goal.w1, goal.b1, goal.w2, goal.b2``, each block row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from planmax.grid import FeatureGrid
from planmax.maxent import RewardGrids
from planmax.nn import ParamLayout, dlogsigmoid, glorot, logsigmoid, mlp_backward, mlp_forward

HEADS = ("path", "goal")
HIDDEN = 32


def _layout(n_features: int, hidden: int) -> ParamLayout:
    blocks = []
    for head in HEADS:
        blocks += [
            (f"{head}.w1", (hidden, n_features)),
            (f"{head}.b1", (hidden,)),
            (f"{head}.w2", (1, hidden)),
            (f"{head}.b2", (1,)),
        ]
    return ParamLayout(blocks)


def _as_matrix(features) -> tuple[np.ndarray, tuple[int, int]]:
    v = features.values if isinstance(features, FeatureGrid) else np.asarray(features, dtype=float)
    h, w, d = v.shape
    return v.reshape(h * w, d), (h, w)


@dataclass(frozen=True, eq=False)
class RewardParams:
    """Parameters of the two reward heads, stored flat."""

    theta: np.ndarray
    n_features: int
    hidden: int = HIDDEN

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def layout(self) -> ParamLayout:
        return _layout(self.n_features, self.hidden)

    @classmethod
    def init(cls, n_features: int, seed, hidden: int = HIDDEN) -> "RewardParams":
        """Glorot-uniform hidden layers, zero output layers (rewards start at -log 2)."""
        rng = np.random.default_rng(seed)
        layout = _layout(n_features, hidden)
        theta = np.zeros(layout.size)
        for head in HEADS:
            theta[layout.slice(f"{head}.w1")] = glorot(rng, hidden, n_features).ravel()
        return cls(theta, n_features, hidden)

    def with_theta(self, theta) -> "RewardParams":
        return RewardParams(theta, self.n_features, self.hidden)

    def head(self, name: str):
        v = self.layout.views(self.theta)
        return v[f"{name}.w1"], v[f"{name}.b1"], v[f"{name}.w2"], v[f"{name}.b2"]

    def pre_activations(self, features) -> dict[str, np.ndarray]:
        x, shape = _as_matrix(features)
        self._check(x)
        return {h: mlp_forward(x, *self.head(h))[0][:, 0].reshape(shape) for h in HEADS}

    def forward(self, features) -> RewardGrids:
        z = self.pre_activations(features)
        return RewardGrids(logsigmoid(z["path"]), logsigmoid(z["goal"]))

    def backward(self, features, upstream) -> np.ndarray:
        x, shape = _as_matrix(features)
        self._check(x)
        up = np.asarray(upstream, dtype=float)
        if up.shape != (2, *shape):
            raise ValueError(f"upstream must be (2, {shape[0]}, {shape[1]})")
        layout = self.layout
        grad = np.zeros(layout.size)
        for i, head in enumerate(HEADS):
            w1, b1, w2, b2 = self.head(head)
            z, cache = mlp_forward(x, w1, b1, w2, b2)
            dz = (up[i].reshape(-1) * dlogsigmoid(z[:, 0]))[:, None]
            for name, g in zip(("w1", "b1", "w2", "b2"), mlp_backward(x, w2, cache, dz)):
                grad[layout.slice(f"{head}.{name}")] = g.ravel()
        return grad

    def _check(self, x):
        if x.shape[1] != self.n_features:
            raise ValueError(f"feature dimension {x.shape[1]} != {self.n_features}")

    def to_json(self) -> dict:
        return {
            "kind": "reward-mlp",
            "n_features": self.n_features,
            "hidden": self.hidden,
            "order": [f"{n}{list(s)}" for n, s in self.layout.blocks],
            "values": self.theta.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RewardParams":
        if d.get("kind") != "reward-mlp":
            raise ValueError(f"not a reward-mlp checkpoint: {d.get('kind')!r}")
        return cls(np.array(d["values"], dtype=float), int(d["n_features"]), int(d["hidden"]))


@dataclass(frozen=True, eq=False)
class TabularRewards:
    """One free pre-activation per cell and head; capacity-unconstrained baseline."""

    theta: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (2 * self.shape[0] * self.shape[1],):
            raise ValueError("tabular rewards need 2*H*W parameters")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, shape) -> "TabularRewards":
        return cls(np.zeros(2 * shape[0] * shape[1]), tuple(shape))

    def with_theta(self, theta) -> "TabularRewards":
        return TabularRewards(theta, self.shape)

    def forward(self, features=None) -> RewardGrids:
        z = self.theta.reshape(2, *self.shape)
        return RewardGrids(logsigmoid(z[0]), logsigmoid(z[1]))

    def backward(self, features, upstream) -> np.ndarray:
        z = self.theta.reshape(2, *self.shape)
        return (np.asarray(upstream, dtype=float) * dlogsigmoid(z)).ravel()


def forward_rewards(features, params) -> RewardGrids:
    """Path and goal rewards for every cell."""
    return params.forward(features)


def backward_rewards(features, params, upstream) -> np.ndarray:
    """Chain-rule gradient of a scalar with ``d/dr = upstream`` (stacked path, goal)."""
    return params.backward(features, upstream)
