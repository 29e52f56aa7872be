"""Plan-conditioned trajectory generator and the constant-speed spline rollout.

Architecture (all recurrences are GRUs with PyTorch gate layout r, z, n):

* motion encoder: tanh embedding of ``[x, y, |v|, a, yaw_rate] / pos_scale``
  per history sample, then a GRU; its final state is ``h_m0``;
* plan encoder: per plan state, tanh embeddings of the cell location
  (``[x, y] / pos_scale`` plus a goal flag), the scene features at the cell
  and the surrounding-agent layer at the cell, concatenated and fed to a
  bidirectional GRU;
* decoder: ``h_1 = h_m0``; for t >= 2 an additive attention over the plan
  encodings scored from ``h_{t-1}`` feeds a GRU step; every state is
  projected to a position (times ``pos_scale``).

Gradients are computed by explicit backpropagation through time over padded
batches (plans left-aligned, padded positions masked out of the attention).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit

from planmax.grid import FeatureGrid, Plan, SceneGrid, TrackHistory
from planmax.nn import ParamLayout, glorot
from planmax.optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajGenConfig:
    scene_dim: int
    horizon: int = 12
    history: int = 9
    hidden: int = 32
    motion_embed: int = 16
    loc_embed: int = 16
    scene_embed: int = 32
    agent_embed: int = 16
    att_hidden: int = 32
    motion_dim: int = 5
    agent_dim: int = 3
    pos_scale: float = 10.0


BLOCK_GROUPS = {
    "motion": ("ex.W", "ex.b", "gm.Wx", "gm.Wh", "gm.bx", "gm.bh"),
    "plan": (
        "loc.W", "loc.b", "scn.W", "scn.b", "agt.W", "agt.b",
        "gf.Wx", "gf.Wh", "gf.bx", "gf.bh", "gb.Wx", "gb.Wh", "gb.bx", "gb.bh",
    ),
    "attention": ("att.Wd", "att.Ws", "att.b", "att.v"),
    "decoder": ("gd.Wx", "gd.Wh", "gd.bx", "gd.bh"),
    "output": ("out.W", "out.b"),
}


def _gru_blocks(prefix, n_in, hidden):
    return [
        (f"{prefix}.Wx", (3 * hidden, n_in)),
        (f"{prefix}.Wh", (3 * hidden, hidden)),
        (f"{prefix}.bx", (3 * hidden,)),
        (f"{prefix}.bh", (3 * hidden,)),
    ]


def make_layout(cfg: TrajGenConfig) -> ParamLayout:
    H = cfg.hidden
    emb = cfg.loc_embed + cfg.scene_embed + cfg.agent_embed
    blocks = [
        ("ex.W", (cfg.motion_embed, cfg.motion_dim)),
        ("ex.b", (cfg.motion_embed,)),
        *_gru_blocks("gm", cfg.motion_embed, H),
        ("loc.W", (cfg.loc_embed, 3)),
        ("loc.b", (cfg.loc_embed,)),
        ("scn.W", (cfg.scene_embed, cfg.scene_dim)),
        ("scn.b", (cfg.scene_embed,)),
        ("agt.W", (cfg.agent_embed, cfg.agent_dim)),
        ("agt.b", (cfg.agent_embed,)),
        *_gru_blocks("gf", emb, H),
        *_gru_blocks("gb", emb, H),
        ("att.Wd", (cfg.att_hidden, H)),
        ("att.Ws", (cfg.att_hidden, 2 * H)),
        ("att.b", (cfg.att_hidden,)),
        ("att.v", (cfg.att_hidden,)),
        *_gru_blocks("gd", 2 * H, H),
        ("out.W", (2, H)),
        ("out.b", (2,)),
    ]
    return ParamLayout(blocks)


@dataclass(frozen=True, eq=False)
class TrajGenParams:
    theta: np.ndarray
    config: TrajGenConfig

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
        return make_layout(self.config)

    @classmethod
    def init(cls, config: TrajGenConfig, seed) -> "TrajGenParams":
        rng = np.random.default_rng(seed)
        layout = make_layout(config)
        theta = np.zeros(layout.size)
        for name, shape in layout.blocks:
            if len(shape) == 2:
                theta[layout.slice(name)] = glorot(rng, *shape).ravel()
            elif name == "att.v":
                theta[layout.slice(name)] = glorot(rng, 1, shape[0]).ravel()
        return cls(theta, config)

    @classmethod
    def zeros(cls, config: TrajGenConfig) -> "TrajGenParams":
        return cls(np.zeros(make_layout(config).size), config)

    def with_theta(self, theta) -> "TrajGenParams":
        return TrajGenParams(theta, self.config)

    def views(self) -> dict[str, np.ndarray]:
        return self.layout.views(self.theta)

    def to_json(self) -> dict:
        return {
            "kind": "trajgen",
            "config": asdict(self.config),
            "order": [f"{n}{list(s)}" for n, s in self.layout.blocks],
            "values": self.theta.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrajGenParams":
        if d.get("kind") != "trajgen":
            raise ValueError(f"not a trajgen checkpoint: {d.get('kind')!r}")
        return cls(np.array(d["values"], dtype=float), TrajGenConfig(**d["config"]))


# --------------------------------------------------------------------------- GRU


def gru_step(x, h, Wx, Wh, bx, bh):
    H = h.shape[-1]
    gx = x @ Wx.T + bx
    gh = h @ Wh.T + bh
    r = expit(gx[:, :H] + gh[:, :H])
    z = expit(gx[:, H : 2 * H] + gh[:, H : 2 * H])
    ghn = gh[:, 2 * H :]
    n = np.tanh(gx[:, 2 * H :] + r * ghn)
    return (1.0 - z) * n + z * h, (x, h, r, z, n, ghn)


def gru_step_backward(dh_new, cache, Wx, Wh, g, prefix):
    x, h, r, z, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dar = dan * ghn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    g[f"{prefix}.Wx"] += dgx.T @ x
    g[f"{prefix}.bx"] += dgx.sum(axis=0)
    g[f"{prefix}.Wh"] += dgh.T @ h
    g[f"{prefix}.bh"] += dgh.sum(axis=0)
    return dgx @ Wx, dh + dgh @ Wh


def run_gru(xs, p, prefix, h0=None):
    """Unroll over axis 1 of ``xs`` (B, L, D); returns states (B, L, H) and caches."""
    B, L, _ = xs.shape
    H = p[f"{prefix}.Wh"].shape[1]
    h = np.zeros((B, H)) if h0 is None else h0
    out = np.empty((B, L, H))
    caches = []
    for t in range(L):
        h, c = gru_step(xs[:, t], h, p[f"{prefix}.Wx"], p[f"{prefix}.Wh"], p[f"{prefix}.bx"], p[f"{prefix}.bh"])
        out[:, t] = h
        caches.append(c)
    return out, caches


def run_gru_backward(dout, caches, p, g, prefix):
    """BPTT for ``run_gru``; returns d inputs (B, L, D) and d h0."""
    B, L, _ = dout.shape
    dxs = np.empty((B, L, p[f"{prefix}.Wx"].shape[1]))
    dh = np.zeros((B, dout.shape[2]))
    for t in range(L - 1, -1, -1):
        dx, dh = gru_step_backward(dh + dout[:, t], caches[t], p[f"{prefix}.Wx"], p[f"{prefix}.Wh"], g, prefix)
        dxs[:, t] = dx
    return dxs, dh


# ----------------------------------------------------------------------- batches


@dataclass(eq=False)
class PlanBatch:
    """Left-aligned padded plan-state inputs.

    ``loc`` (B, L, 3), ``scene`` (B, L, Ds), ``agents`` (B, L, 3), ``lengths``
    counts states including the goal state, ``example`` maps rows to motion
    encodings.
    """

    loc: np.ndarray
    scene: np.ndarray
    agents: np.ndarray
    lengths: np.ndarray
    example: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.loc.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return len(self.lengths)

    def take(self, rows) -> "PlanBatch":
        """Subset of rows, trimmed to the longest remaining plan."""
        rows = np.asarray(rows, dtype=np.int64)
        L = int(self.lengths[rows].max())
        return PlanBatch(
            self.loc[rows, :L], self.scene[rows, :L], self.agents[rows, :L], self.lengths[rows], self.example[rows]
        )


def plan_batch_from_arrays(cells, n_path, features: FeatureGrid, pos_scale: float, example: int = 0) -> PlanBatch:
    """Plans given as flat path-cell indices (B, *) with ``n_path`` path states each."""
    cells = np.asarray(cells, dtype=np.int64)
    n_path = np.asarray(n_path, dtype=np.int64)
    B = len(n_path)
    L = int(n_path.max()) + 1
    k = np.arange(L)[None, :]
    padded = np.zeros((B, L), dtype=np.int64)
    width = min(cells.shape[1], L)
    padded[:, :width] = np.where(cells[:, :width] >= 0, cells[:, :width], 0)
    last = cells[np.arange(B), n_path - 1]
    idx = np.where(k < n_path[:, None], padded, last[:, None])
    is_goal = (k == n_path[:, None]).astype(float)
    flat = features.values.reshape(-1, features.dim)
    coords = flat[:, -2:]
    scene = flat[:, : 2 * features.n_channels]
    agents = features.agents.reshape(-1, features.agents.shape[-1])
    loc = np.concatenate([coords[idx] / pos_scale, is_goal[..., None]], axis=-1)
    return PlanBatch(loc, scene[idx], agents[idx], n_path + 1, np.full(B, example, dtype=np.int64))


def plan_batch(plans: list[Plan], features: FeatureGrid, pos_scale: float, example: int = 0) -> PlanBatch:
    w = features.shape[1]
    n_path = np.array([len(p.cells) for p in plans])
    cells = np.full((len(plans), int(n_path.max())), -1, dtype=np.int64)
    for i, p in enumerate(plans):
        cells[i, : len(p.cells)] = [r * w + c for r, c in p.cells]
    return plan_batch_from_arrays(cells, n_path, features, pos_scale, example)


def concat_batches(batches: list[PlanBatch]) -> PlanBatch:
    L = max(b.loc.shape[1] for b in batches)

    def pad(a):
        out = np.zeros((a.shape[0], L, a.shape[2]))
        out[:, : a.shape[1]] = a
        return out

    return PlanBatch(
        np.concatenate([pad(b.loc) for b in batches]),
        np.concatenate([pad(b.scene) for b in batches]),
        np.concatenate([pad(b.agents) for b in batches]),
        np.concatenate([b.lengths for b in batches]),
        np.concatenate([b.example for b in batches]),
    )


def motion_inputs(tracks: list[TrackHistory], cfg: TrajGenConfig) -> np.ndarray:
    """(E, history, 5) inputs; short tracks are front-padded with their earliest sample."""
    out = np.empty((len(tracks), cfg.history, cfg.motion_dim))
    for i, tr in enumerate(tracks):
        x = tr.inputs()[-cfg.history :]
        pad = cfg.history - len(x)
        if pad > 0:
            x = np.vstack([np.repeat(x[:1], pad, axis=0), x])
        out[i] = x
    return out / cfg.pos_scale


# ----------------------------------------------------------------- forward/back


@dataclass(eq=False)
class Forward:
    Y: np.ndarray
    alphas: np.ndarray
    h_m0: np.ndarray
    hs: np.ndarray
    cache: dict = field(repr=False)


def _reverse_index(lengths, L):
    k = np.arange(L)[None, :]
    return np.where(k < lengths[:, None], lengths[:, None] - 1 - k, k)


def _gather(a, idx):
    return np.take_along_axis(a, idx[..., None], axis=1)


def encode_motion_batch(motion_x, p):
    e = np.tanh(motion_x @ p["ex.W"].T + p["ex.b"])
    states, caches = run_gru(e, p, "gm")
    return states[:, -1], (motion_x, e, caches)


def encode_plans_batch(batch: PlanBatch, p):
    e_loc = np.tanh(batch.loc @ p["loc.W"].T + p["loc.b"])
    e_scn = np.tanh(batch.scene @ p["scn.W"].T + p["scn.b"])
    e_agt = np.tanh(batch.agents @ p["agt.W"].T + p["agt.b"])
    phi = np.concatenate([e_loc, e_scn, e_agt], axis=-1)
    L = phi.shape[1]
    rev = _reverse_index(batch.lengths, L)
    hf, cf = run_gru(phi, p, "gf")
    hb_rev, cb = run_gru(_gather(phi, rev), p, "gb")
    hb = _gather(hb_rev, rev)
    hs = np.concatenate([hf, hb], axis=-1)
    return hs, (e_loc, e_scn, e_agt, rev, cf, cb)


def decode_batch(h0, hs, mask, p, horizon, pos_scale):
    B = h0.shape[0]
    proj = hs @ p["att.Ws"].T + p["att.b"]
    Y = np.empty((B, horizon, 2))
    alphas = np.zeros((B, max(horizon - 1, 0), hs.shape[1]))
    h = h0
    Y[:, 0] = pos_scale * (h @ p["out.W"].T + p["out.b"])
    states = [h]
    steps = []
    for t in range(1, horizon):
        a = np.tanh(proj + (h @ p["att.Wd"].T)[:, None, :])
        e = np.where(mask, a @ p["att.v"], -np.inf)
        e = e - e.max(axis=1, keepdims=True)
        w = np.exp(e)
        alpha = w / w.sum(axis=1, keepdims=True)
        ctx = np.einsum("bl,bld->bd", alpha, hs)
        h_prev = h
        h, gc = gru_step(ctx, h, p["gd.Wx"], p["gd.Wh"], p["gd.bx"], p["gd.bh"])
        Y[:, t] = pos_scale * (h @ p["out.W"].T + p["out.b"])
        alphas[:, t - 1] = alpha
        states.append(h)
        steps.append((a, alpha, h_prev, gc))
    return Y, alphas, (proj, states, steps)


def forward(params: TrajGenParams, motion_x: np.ndarray, batch: PlanBatch) -> Forward:
    """Decode one trajectory per plan row; ``motion_x`` holds one row per example."""
    p = params.views()
    cfg = params.config
    h_m, mcache = encode_motion_batch(motion_x, p)
    hs, pcache = encode_plans_batch(batch, p)
    Y, alphas, dcache = decode_batch(h_m[batch.example], hs, batch.mask, p, cfg.horizon, cfg.pos_scale)
    return Forward(Y, alphas, h_m, hs, {"motion": mcache, "plan": pcache, "dec": dcache, "batch": batch})


def backward(params: TrajGenParams, fw: Forward, dY: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss with ``dL/dY = dY`` w.r.t. the flat parameters."""
    p = params.views()
    cfg = params.config
    layout = params.layout
    grad = np.zeros(layout.size)
    g = layout.views(grad)
    batch = fw.cache["batch"]
    hs = fw.hs
    proj, states, steps = fw.cache["dec"]

    # output projections
    dout = cfg.pos_scale * dY
    dstates = [dout[:, t] @ p["out.W"] for t in range(cfg.horizon)]
    for t in range(cfg.horizon):
        g["out.W"] += dout[:, t].T @ states[t]
    g["out.b"] += dout.sum(axis=(0, 1))

    dhs = np.zeros_like(hs)
    dproj = np.zeros_like(proj)
    dh = dstates[-1]
    for t in range(cfg.horizon - 1, 0, -1):
        a, alpha, h_prev, gc = steps[t - 1]
        dctx, dh_prev = gru_step_backward(dh, gc, p["gd.Wx"], p["gd.Wh"], g, "gd")
        # attention
        dalpha = np.einsum("bd,bld->bl", dctx, hs)
        dhs += alpha[:, :, None] * dctx[:, None, :]
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        g["att.v"] += np.einsum("bl,bla->a", de, a)
        dpre = de[:, :, None] * p["att.v"] * (1.0 - a * a)
        dproj += dpre
        dq = dpre.sum(axis=1)
        g["att.Wd"] += dq.T @ h_prev
        dh_prev = dh_prev + dq @ p["att.Wd"]
        dh = dh_prev + dstates[t - 1]
    dh0 = dh

    g["att.Ws"] += np.einsum("bla,bld->ad", dproj, hs)
    g["att.b"] += dproj.sum(axis=(0, 1))
    dhs += dproj @ p["att.Ws"]

    # plan encoder
    e_loc, e_scn, e_agt, rev, cf, cb = fw.cache["plan"]
    H = cfg.hidden
    mask = batch.mask[..., None]
    dhf = dhs[..., :H] * mask
    dhb = dhs[..., H:] * mask
    dphi, _ = run_gru_backward(dhf, cf, p, g, "gf")
    dphi_rev, _ = run_gru_backward(_gather(dhb, rev) * mask, cb, p, g, "gb")
    # scatter reversed-input gradients back (rev is an involution on valid slots)
    dphi += _gather(dphi_rev, rev) * mask
    nl, ns = cfg.loc_embed, cfg.scene_embed
    for name, e, x, d in (
        ("loc", e_loc, batch.loc, dphi[..., :nl]),
        ("scn", e_scn, batch.scene, dphi[..., nl : nl + ns]),
        ("agt", e_agt, batch.agents, dphi[..., nl + ns :]),
    ):
        da = d * (1.0 - e * e)
        g[f"{name}.W"] += np.einsum("ble,bld->ed", da, x)
        g[f"{name}.b"] += da.sum(axis=(0, 1))

    # motion encoder
    dh_m = np.zeros_like(fw.h_m0)
    np.add.at(dh_m, batch.example, dh0)
    motion_x, e_m, mc = fw.cache["motion"]
    dstates_m = np.zeros((*e_m.shape[:2], H))
    dstates_m[:, -1] = dh_m
    de_m, _ = run_gru_backward(dstates_m, mc, p, g, "gm")
    da = de_m * (1.0 - e_m * e_m)
    g["ex.W"] += np.einsum("bte,btd->ed", da, motion_x)
    g["ex.b"] += da.sum(axis=(0, 1))
    return grad


# ------------------------------------------------------------- single instance


def encode_motion(track: TrackHistory, params: TrajGenParams) -> np.ndarray:
    h, _ = encode_motion_batch(motion_inputs([track], params.config), params.views())
    return h[0]


def encode_plan(plan: Plan, features: FeatureGrid, params: TrajGenParams) -> np.ndarray:
    """Per-state BiGRU encodings (plan length, 2 * hidden)."""
    batch = plan_batch([plan], features, params.config.pos_scale)
    hs, _ = encode_plans_batch(batch, params.views())
    return hs[0]


def decode_trajectory(h_m0, plan_encodings, params: TrajGenParams):
    """Decode positions (horizon, 2) and attention weights (horizon - 1, plan length)."""
    hs = np.asarray(plan_encodings, dtype=float)[None]
    mask = np.ones(hs.shape[:2], dtype=bool)
    cfg = params.config
    Y, alphas, _ = decode_batch(np.asarray(h_m0, dtype=float)[None], hs, mask, params.views(), cfg.horizon, cfg.pos_scale)
    return Y[0], alphas[0]


def generate(params: TrajGenParams, track: TrackHistory, batch: PlanBatch) -> np.ndarray:
    """Trajectories (B, horizon, 2) for every plan row of ``batch`` (one track)."""
    return forward(params, motion_inputs([track], params.config), batch).Y


# ----------------------------------------------------------------------- losses


def ade(Y, G):
    """Average displacement error per row: mean over time of the L2 distance."""
    return np.linalg.norm(Y - G, axis=-1).mean(axis=-1)


def ade_grad(Y, G):
    diff = Y - G
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, diff / safe, 0.0) / Y.shape[-2]


def min_ade_loss(params: TrajGenParams, motion_x, batch: PlanBatch, gt):
    """MinADE over the rows of ``batch`` (one example) and its gradient."""
    fw = forward(params, motion_x, batch)
    errs = ade(fw.Y, gt[None])
    k = int(np.argmin(errs))
    dY = np.zeros_like(fw.Y)
    dY[k] = ade_grad(fw.Y[k], gt)
    return float(errs[k]), backward(params, fw, dY)


# ------------------------------------------------------------ spline baseline


def rollout_along_plan(plan: Plan, grid: SceneGrid, arc) -> np.ndarray:
    """Points at the given arc positions along a natural cubic spline through the plan.

    The spline interpolates the path cell centers parameterized by cumulative
    chord length; positions past the last waypoint clamp to it.
    """
    arc = np.asarray(arc, dtype=float)
    pts = np.array([grid.cell_center(r, c) for r, c in plan.cells])
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    if len(pts) == 1:
        return np.repeat(pts, len(arc), axis=0)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    spline = CubicSpline(s, pts, bc_type="natural")
    return spline(np.clip(arc, 0.0, s[-1]))


def constant_speed_rollout(plan: Plan, grid: SceneGrid, speed: float, dt: float, horizon: int) -> np.ndarray:
    """Constant-speed trajectory (horizon, 2) along the smoothed plan."""
    if speed < 0:
        raise ValueError("speed must be non-negative")
    return rollout_along_plan(plan, grid, speed * dt * np.arange(1, horizon + 1))


# --------------------------------------------------------------------- training


@dataclass
class TrajGenTrainConfig:
    pretrain_steps: int = 2000
    steps: int = 0
    batch: int = 8
    lr: float = 1e-4
    n_plans: int = 200
    K: int = 20
    N: int = 50
    seed: int = 0
    minade_lr: float | None = None  # stage-2 learning rate; None keeps ``lr``


@dataclass(frozen=True, eq=False)
class TrajSample:
    """One training instance: motion, scene features, ground-truth plan and future."""

    track: TrackHistory
    features: FeatureGrid
    plan: Plan
    future: np.ndarray


@dataclass
class TrajGenResult:
    params: TrajGenParams
    adam: AdamState
    curve: list[dict] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    pass


def pretrain_loss(params: TrajGenParams, samples: list[TrajSample]):
    """Mean ADE of trajectories decoded from the ground-truth plans, with gradient."""
    cfg = params.config
    batch = concat_batches(
        [plan_batch([s.plan], s.features, cfg.pos_scale, example=i) for i, s in enumerate(samples)]
    )
    motion_x = motion_inputs([s.track for s in samples], cfg)
    fw = forward(params, motion_x, batch)
    gt = np.stack([s.future for s in samples])
    errs = ade(fw.Y, gt)
    dY = ade_grad(fw.Y, gt) / len(samples)
    return float(errs.mean()), backward(params, fw, dY)


def sampled_plan_batch(sample: TrajSample, reward_params, N, n_plans, rng, pos_scale, example=0):
    """Sample plans from the reward model's policy; unique plans and their counts."""
    from planmax.maxent import sample_plan_arrays, solve_inferred

    r = reward_params.forward(sample.features)
    policy = solve_inferred(r, N)
    cells, lengths = sample_plan_arrays(policy, sample.plan.cells[0], n_plans, rng)
    key = np.column_stack([lengths, cells])
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    return plan_batch_from_arrays(uniq[:, 1:], uniq[:, 0], sample.features, pos_scale, example), counts


def min_ade_k_loss(params: TrajGenParams, samples, reward_params, tcfg: TrajGenTrainConfig, rng):
    """Clustered MinADE_K with assignments held fixed; mean over ``samples``."""
    from planmax.forecast import kmeans_cluster

    cfg = params.config
    batches, weights = [], []
    for i, s in enumerate(samples):
        b, counts = sampled_plan_batch(s, reward_params, tcfg.N, tcfg.n_plans, rng, cfg.pos_scale, i)
        batches.append(b)
        weights.append(counts)
    batch = concat_batches(batches)
    motion_x = motion_inputs([s.track for s in samples], cfg)
    Y_all = forward(params, motion_x, batch).Y
    rows, grads = [], []
    total = 0.0
    lo = 0
    for i, s in enumerate(samples):
        n = len(batches[i])
        Y = Y_all[lo : lo + n]
        w = weights[i].astype(float)
        km = kmeans_cluster(Y, min(tcfg.K, n), seed=int(rng.integers(2**31)), weights=w)
        errs = ade(km.centroids, s.future[None])
        k = int(np.argmin(errs))
        total += float(errs[k])
        members = np.flatnonzero(km.labels == k)
        dc = ade_grad(km.centroids[k], s.future) / len(samples)
        share = (w[members] / w[members].sum())[:, None, None]
        rows.append(lo + members)
        grads.append(share * dc)
        lo += n
    # only the winning cluster's members receive gradient, so backpropagate through those rows alone
    fw = forward(params, motion_x, batch.take(np.concatenate(rows)))
    return total / len(samples), backward(params, fw, np.concatenate(grads))


def train_trajgen(
    dataset: list[TrajSample],
    tcfg: TrajGenTrainConfig,
    params: TrajGenParams,
    reward_params=None,
    adam: AdamState | None = None,
) -> TrajGenResult:
    """Pretrain on ground-truth plans, then minimize clustered MinADE_K on sampled plans."""
    if not dataset:
        raise ValueError("empty dataset")
    if tcfg.steps > 0 and reward_params is None:
        raise ValueError("stage 2 needs a trained reward model")
    adam = AdamState.zeros(params.theta.size, lr=tcfg.lr) if adam is None else adam
    rng = np.random.default_rng(tcfg.seed)
    curve = []
    plan_ok = [s for s in dataset if len(s.plan.cells) <= tcfg.N]
    for stage, n_steps in (("pretrain", tcfg.pretrain_steps), ("minade", tcfg.steps)):
        if n_steps:
            lr = tcfg.minade_lr if stage == "minade" and tcfg.minade_lr is not None else tcfg.lr
            adam = replace(adam, lr=lr)
        for _ in range(n_steps):
            idx = rng.choice(len(plan_ok), size=min(tcfg.batch, len(plan_ok)), replace=False)
            batch = [plan_ok[i] for i in idx]
            if stage == "pretrain":
                loss, grad = pretrain_loss(params, batch)
            else:
                loss, grad = min_ade_k_loss(params, batch, reward_params, tcfg, rng)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDiverged(f"non-finite loss at step {adam.step}")
            theta, adam = adam_step(params.theta, grad, adam)
            params = params.with_theta(theta)
            curve.append({"step": adam.step, "stage": stage, "loss": loss})
            if adam.step % 100 == 0:
                log.info("trajgen %s step %d loss %.4f", stage, adam.step, loss)
    return TrajGenResult(params, adam, curve)
