"""Sample, decode and cluster: the forecasting pipelines and their baselines.

Variants share inputs and output schema:

* ``P2T_IRL``: plans sampled from the learned MaxEnt policy, decoded by the
  trajectory generator;
* ``P2T_CS``: same plans, constant-speed spline rollout instead of the decoder;
* ``P2T_BC``: plans sampled from a behavior-cloned stationary policy, decoded;
* ``CV``: a single constant-velocity extrapolation along the current heading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from planmax import kernels
from planmax.grid import FeatureGrid, Plan, SceneGrid, TrackHistory, assemble_features
from planmax.maxent import END, arrays_to_plans, neighbor_table, plan_actions, sample_plan_arrays, solve_inferred
from planmax.nn import ParamLayout, glorot, mlp_backward, mlp_forward
from planmax.optim import AdamState, adam_step
from planmax.trajgen import TrajGenParams, constant_speed_rollout, generate, plan_batch_from_arrays

VARIANTS = ("P2T_IRL", "P2T_CS", "P2T_BC", "CV")


# ---------------------------------------------------------------------- k-means


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray  # (K, ...) in the input's trailing shape
    counts: np.ndarray  # total weight per cluster
    labels: np.ndarray  # cluster of every input row
    inertia: float
    history: tuple[float, ...]


def _kmeanspp(x, w, K, rng):
    centers = np.empty((K, x.shape[1]))
    first = rng.choice(len(x), p=w / w.sum())
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        p = w * d2
        total = p.sum()
        idx = rng.choice(len(x), p=p / total) if total > 0 else rng.choice(len(x), p=w / w.sum())
        centers[k] = x[idx]
        d2 = np.minimum(d2, ((x - centers[k]) ** 2).sum(axis=1))
    return centers


def _lloyd(x, w, centers, max_iter):
    K = len(centers)
    labels, d2 = kernels.assign_nearest(x, centers)
    history = [float(w @ d2)]
    for _ in range(max_iter):
        mass = np.bincount(labels, weights=w, minlength=K)
        for k in np.flatnonzero(mass == 0):
            # reseed an empty cluster with the point farthest from its centroid
            far = int(np.argmax(d2))
            labels[far] = k
            d2[far] = 0.0
            mass = np.bincount(labels, weights=w, minlength=K)
        for k in range(K):
            m = labels == k
            centers[k] = (w[m] @ x[m]) / w[m].sum()
        new, d2 = kernels.assign_nearest(x, centers)
        inertia = float(w @ d2)
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError("k-means objective increased")
        history.append(inertia)
        if np.array_equal(new, labels):
            break
        labels = new
    return centers, new, history


def kmeans_cluster(trajectories, K: int, seed, weights=None, n_init: int = 10, max_iter: int = 100) -> KMeansResult:
    """Weighted k-means on flattened trajectories.

    ``weights`` are row multiplicities (default 1); identical rows are merged
    first, so duplicating every input leaves the result unchanged.  Seeding is
    k-means++, ties in assignment go to the lowest cluster index, and the best
    of ``n_init`` restarts by within-cluster sum of squares is kept.  When
    fewer distinct rows than K exist, the heaviest clusters are split.
    """
    traj = np.asarray(trajectories, dtype=float)
    M = len(traj)
    x_all = np.ascontiguousarray(traj.reshape(M, -1))
    w_all = np.ones(M) if weights is None else np.asarray(weights, dtype=float)
    if K < 1:
        raise ValueError("K must be >= 1")
    total = w_all.sum()
    if M == 0 or total < K:
        raise ValueError(f"need at least K={K} trajectories, got {total:g}")
    x, inv = np.unique(x_all, axis=0, return_inverse=True)
    inv = inv.ravel()
    w = np.bincount(inv, weights=w_all, minlength=len(x))
    U = len(x)
    rng = np.random.default_rng(seed)
    if U <= K:
        centroids = list(x)
        counts = list(w)
        while len(centroids) < K:
            j = int(np.argmax(counts))
            half = math.floor(counts[j] / 2)
            counts[j] -= half
            centroids.append(centroids[j].copy())
            counts.append(half)
        centroids = np.array(centroids)
        counts = np.array(counts)
        labels_u = np.arange(U)
        inertia = 0.0
        history = (0.0,)
    else:
        best = None
        for _ in range(n_init):
            c, lab, hist = _lloyd(x, w, _kmeanspp(x, w, K, rng), max_iter)
            if best is None or hist[-1] < best[2][-1]:
                best = (c.copy(), lab.copy(), hist)
        centroids, labels_u, history = best
        counts = np.bincount(labels_u, weights=w, minlength=K)
        inertia = history[-1]
        history = tuple(history)
    # order clusters by decreasing mass, ties by index
    order = np.lexsort((np.arange(K), -counts))
    rank = np.empty(K, dtype=np.int64)
    rank[order] = np.arange(K)
    return KMeansResult(
        centroids[order].reshape(K, *traj.shape[1:]),
        counts[order],
        rank[labels_u][inv],
        float(inertia),
        history,
    )


# ------------------------------------------------------------------ forecasts


@dataclass(frozen=True, eq=False)
class ForecastSet:
    trajectories: np.ndarray  # (K, T_f, 2)
    members: np.ndarray  # (K,)
    variant: str
    plans: tuple = field(default=())  # most frequent plan per cluster, when plan based

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        t = np.asarray(self.trajectories, dtype=float)
        if t.ndim != 3 or t.shape[2] != 2 or len(t) != len(self.members):
            raise ValueError("trajectories must be (K, T_f, 2) with one member count each")
        if not np.all(np.isfinite(t)):
            raise ValueError("trajectories must be finite")
        object.__setattr__(self, "trajectories", t)
        object.__setattr__(self, "members", np.asarray(self.members, dtype=np.int64))

    @property
    def K(self) -> int:
        return len(self.trajectories)

    @property
    def M(self) -> int:
        return int(self.members.sum())

    def records(self) -> list[dict]:
        return [
            {"variant": self.variant, "k_index": k, "members": int(m), "points": t.tolist()}
            for k, (t, m) in enumerate(zip(self.trajectories, self.members))
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    @classmethod
    def from_records(cls, records) -> "ForecastSet":
        records = sorted(records, key=lambda r: r["k_index"])
        variants = {r["variant"] for r in records}
        if len(variants) != 1:
            raise ValueError("records mix forecast variants")
        return cls(
            np.array([r["points"] for r in records], dtype=float),
            np.array([r["members"] for r in records]),
            variants.pop(),
        )


def _unique_plans(cells, lengths):
    key = np.column_stack([lengths, cells])
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return uniq[:, 1:], uniq[:, 0], inv.ravel(), counts


def _cluster_plans(traj_u, counts, cells_u, len_u, K, seed, width, variant):
    km = kmeans_cluster(traj_u, K, seed, weights=counts)
    reps = []
    for k in range(K):
        idx = np.flatnonzero(km.labels == k)
        if len(idx) == 0:
            idx = np.array([int(np.argmin(((traj_u - km.centroids[k]) ** 2).sum(axis=(1, 2))))])
        j = idx[np.argmax(counts[idx])]
        reps.append(arrays_to_plans(cells_u[j : j + 1], len_u[j : j + 1], width)[0])
    return ForecastSet(km.centroids, np.rint(km.counts).astype(np.int64), variant, tuple(reps))


def sample_policy_plans(scene: SceneGrid, features: FeatureGrid, reward_params, N: int, M: int, rng):
    r = reward_params.forward(features)
    policy = solve_inferred(r, N)
    return sample_plan_arrays(policy, scene.agent_cell, M, rng)


def forecast(scene: SceneGrid, track: TrackHistory, reward_params, trajgen_params: TrajGenParams, K: int, M: int, seed, N: int = 50) -> ForecastSet:
    """P2T forecast: sample M plans, decode every distinct plan, cluster to K."""
    rng = np.random.default_rng(seed)
    features = assemble_features(scene, track)
    cells, lengths = sample_policy_plans(scene, features, reward_params, N, M, rng)
    return _decode_and_cluster(scene, track, features, trajgen_params, cells, lengths, K, rng, "P2T_IRL")


def _decode_and_cluster(scene, track, features, params, cells, lengths, K, rng, variant):
    cells_u, len_u, _, counts = _unique_plans(cells, lengths)
    batch = plan_batch_from_arrays(cells_u, len_u, features, params.config.pos_scale)
    traj_u = generate(params, track, batch)
    return _cluster_plans(traj_u, counts, cells_u, len_u, K, int(rng.integers(2**31)), scene.width, variant)


def forecast_cs(scene: SceneGrid, track: TrackHistory, reward_params, K: int, M: int, seed, N: int = 50, horizon: int = 12, dt: float = 0.4) -> ForecastSet:
    """P2T_CS: the sampled plans rolled out at the current speed along a spline."""
    rng = np.random.default_rng(seed)
    features = assemble_features(scene, track)
    cells, lengths = sample_policy_plans(scene, features, reward_params, N, M, rng)
    cells_u, len_u, _, counts = _unique_plans(cells, lengths)
    plans = arrays_to_plans(cells_u, len_u, scene.width)
    speed = track.current_speed
    traj_u = np.stack([constant_speed_rollout(p, scene, speed, dt, horizon) for p in plans])
    return _cluster_plans(traj_u, counts, cells_u, len_u, K, int(rng.integers(2**31)), scene.width, "P2T_CS")


def constant_velocity(track: TrackHistory, horizon: int = 12, dt: float = 0.4) -> ForecastSet:
    """Straight-line extrapolation along the agent-frame x axis at the current speed."""
    s = track.current_speed * dt * np.arange(1, horizon + 1)
    traj = np.column_stack([s, np.zeros(horizon)])[None]
    return ForecastSet(traj, np.array([1]), "CV")


# ---------------------------------------------------------- behavior cloning

BC_HIDDEN = 32


def _bc_layout(n_features, hidden):
    return ParamLayout([("w1", (hidden, n_features)), ("b1", (hidden,)), ("w2", (5, hidden)), ("b2", (5,))])


@dataclass(frozen=True, eq=False)
class BCParams:
    """Per-cell MLP mapping features to action logits (up, down, left, right, end)."""

    theta: np.ndarray
    n_features: int
    hidden: int = BC_HIDDEN

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
        return _bc_layout(self.n_features, self.hidden)

    @classmethod
    def init(cls, n_features: int, seed, hidden: int = BC_HIDDEN) -> "BCParams":
        rng = np.random.default_rng(seed)
        layout = _bc_layout(n_features, hidden)
        theta = np.zeros(layout.size)
        theta[layout.slice("w1")] = glorot(rng, hidden, n_features).ravel()
        return cls(theta, n_features, hidden)

    def with_theta(self, theta) -> "BCParams":
        return BCParams(theta, self.n_features, self.hidden)

    def _weights(self):
        v = self.layout.views(self.theta)
        return v["w1"], v["b1"], v["w2"], v["b2"]

    def log_policy(self, features: FeatureGrid) -> np.ndarray:
        """(S, 5) log action probabilities; off-grid moves get -inf."""
        x = features.flat()
        logits, _ = mlp_forward(x, *self._weights())
        h, w = features.shape
        valid = neighbor_table(h, w) >= 0
        return log_softmax(np.where(valid, logits, -np.inf), axis=1)

    def policy(self, features: FeatureGrid) -> np.ndarray:
        return np.exp(self.log_policy(features))

    def to_json(self) -> dict:
        return {
            "kind": "bc-mlp",
            "n_features": self.n_features,
            "hidden": self.hidden,
            "order": [f"{n}{list(s)}" for n, s in self.layout.blocks],
            "values": self.theta.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "BCParams":
        if d.get("kind") != "bc-mlp":
            raise ValueError(f"not a bc-mlp checkpoint: {d.get('kind')!r}")
        return cls(np.array(d["values"], dtype=float), int(d["n_features"]), int(d["hidden"]))


def bc_pairs(plan: Plan, width: int):
    """(state, action) pairs of a demonstration, the last one being ``end``."""
    states = np.array([r * width + c for r, c in plan.cells])
    return states, np.array(plan_actions(plan))


def bc_loss(params: BCParams, demo) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over a demonstration's (state, action) pairs and its gradient."""
    f = demo.features
    x = f.flat()
    w1, b1, w2, b2 = params._weights()
    logits, cache = mlp_forward(x, w1, b1, w2, b2)
    valid = neighbor_table(*f.shape) >= 0
    logp = log_softmax(np.where(valid, logits, -np.inf), axis=1)
    s, a = bc_pairs(demo.plan, f.shape[1])
    loss = -float(logp[s, a].sum())
    dz = np.zeros_like(logits)
    np.add.at(dz, s, np.exp(logp[s]))
    np.add.at(dz, (s, a), -1.0)
    grads = mlp_backward(x, w2, cache, dz)
    return loss, np.concatenate([g.ravel() for g in grads])


@dataclass
class BCConfig:
    lr: float = 1e-4
    batch: int = 8
    epochs: int = 10
    seed: int = 0


@dataclass
class BCResult:
    params: BCParams
    adam: AdamState
    curve: list[dict] = field(default_factory=list)


def train_bc(dataset, config: BCConfig, params: BCParams, adam: AdamState | None = None) -> BCResult:
    """Cross-entropy training on demonstration (state, action) pairs."""
    demos = list(dataset)
    if not demos:
        raise ValueError("no usable demonstrations")
    adam = AdamState.zeros(params.theta.size, lr=config.lr) if adam is None else adam
    rng = np.random.default_rng(config.seed)
    n_pairs = sum(len(d.plan.cells) for d in demos)
    curve = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(demos))
        total = 0.0
        for lo in range(0, len(order), config.batch):
            grad = np.zeros(params.theta.size)
            count = 0
            for i in order[lo : lo + config.batch]:
                loss, g = bc_loss(params, demos[i])
                total += loss
                grad += g
                count += len(demos[i].plan.cells)
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                from planmax.irl import TrainingDiverged

                raise TrainingDiverged(f"non-finite BC loss in epoch {epoch}")
            theta, adam = adam_step(params.theta, grad / count, adam)
            params = params.with_theta(theta)
        curve.append({"epoch": epoch, "train_ce": float(total / n_pairs)})
    return BCResult(params, adam, curve)


def bc_plan_arrays(params: BCParams, features: FeatureGrid, s_init, N: int, M: int, rng):
    """Sample plans from the stationary BC policy; ``end`` is forced at step N."""
    h, w = features.shape
    pi = np.repeat(params.policy(features)[None], N, axis=0)
    pi[N - 1] = 0.0
    pi[N - 1, :, END] = 1.0
    s0 = s_init[0] * w + s_init[1]
    return kernels.sample_plans(np.ascontiguousarray(pi), neighbor_table(h, w), s0, rng.random((M, N)))


def forecast_bc(scene: SceneGrid, track: TrackHistory, bc_params: BCParams, trajgen_params: TrajGenParams, K: int, M: int, seed, N: int = 50) -> ForecastSet:
    """P2T_BC: plans from the behavior-cloned policy, decoded and clustered."""
    rng = np.random.default_rng(seed)
    features = assemble_features(scene, track)
    cells, lengths = bc_plan_arrays(bc_params, features, scene.agent_cell, N, M, rng)
    return _decode_and_cluster(scene, track, features, trajgen_params, cells, lengths, K, rng, "P2T_BC")


def run_variant(variant: str, scene, track, K, M, seed, *, reward=None, trajgen=None, bc=None, N=50, horizon=12, dt=0.4) -> ForecastSet:
    """Dispatch on the variant name with a uniform signature."""
    if variant == "P2T_IRL":
        if reward is None or trajgen is None:
            raise ValueError("P2T_IRL needs reward and trajgen checkpoints")
        return forecast(scene, track, reward, trajgen, K, M, seed, N)
    if variant == "P2T_CS":
        if reward is None:
            raise ValueError("P2T_CS needs a reward checkpoint")
        return forecast_cs(scene, track, reward, K, M, seed, N, horizon, dt)
    if variant == "P2T_BC":
        if bc is None or trajgen is None:
            raise ValueError("P2T_BC needs bc and trajgen checkpoints")
        return forecast_bc(scene, track, bc, trajgen, K, M, seed, N)
    if variant == "CV":
        return constant_velocity(track, horizon, dt)
    raise ValueError(f"unknown variant {variant!r}")
