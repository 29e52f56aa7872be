"""Synthetic scenes, ground-truth rewards and agent tracks for closed-loop checks.

Every scene is laid out in the grid frame of an agent sitting in the center
cell and driving "up" (towards row 0, the +x direction).  Agents arrive on a
straight approach arm, then follow plans sampled from the MaxEnt policy of
hand-specified rewards, converted to continuous motion along a spline with a
per-agent speed and constant acceleration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from planmax.grid import Plan, SceneGrid, TrackHistory
from planmax.maxent import RewardGrids, arrays_to_plans, sample_plan_arrays, solve_inferred
from planmax.trajgen import rollout_along_plan

log = logging.getLogger(__name__)

TEMPLATES = ("corridor", "t-junction", "four-way", "ring", "field")
CHANNELS = ("road", "obstacle")

UP, LEFT, RIGHT = 0.0, math.pi / 2, -math.pi / 2

# ground-truth reward levels
ROAD_PATH = -2.0
EXIT_GOAL = 0.0
OTHER_GOAL = -40.0


@dataclass(frozen=True)
class SceneTemplate:
    """Geometry of a synthetic scene.

    ``offset`` is how many cells ahead of the agent the junction (or ring
    center) sits; ``None`` draws it from the seed.  ``density`` is the
    obstacle probability for the open field.
    """

    kind: str = "t-junction"
    size: int = 15
    cell_size: float = 2.0
    road_width: int = 3
    offset: int | None = None
    density: float = 0.15

    def validate(self):
        if self.kind not in TEMPLATES:
            raise ValueError(f"unknown template {self.kind!r}; choose from {TEMPLATES}")
        if self.size < 7 or self.size % 2 == 0:
            raise ValueError("size must be odd and >= 7")
        if self.road_width < 1 or self.road_width % 2 == 0 or self.road_width > self.size - 4:
            raise ValueError("road_width must be odd, >= 1 and leave room for off-road cells")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.offset is not None and not 0 <= self.offset <= self.size // 2 - self.road_width // 2 - 1:
            raise ValueError("offset puts the junction outside the grid")
        if not 0 <= self.density < 1:
            raise ValueError("density must lie in [0, 1)")
        if self.kind == "ring" and self.size // 2 < 2 * _ring_radius(self.road_width) + self.road_width // 2:
            raise ValueError("grid too small for a ring of this road width")


def _ring_radius(road_width):
    return max(2, road_width // 2 + 2)


def _band(n, center, width):
    half = width // 2
    return slice(max(center - half, 0), min(center + half + 1, n))


def generate_scene(template: SceneTemplate, seed) -> SceneGrid:
    """Deterministic scene for ``(template, seed)``."""
    template.validate()
    rng = np.random.default_rng(seed)
    n = template.size
    c0 = r0 = n // 2
    half = template.road_width // 2
    offset = template.offset
    if offset is None:
        offset = int(rng.integers(0, max(r0 - half - 1, 0) + 1)) if template.kind in ("t-junction", "four-way") else 0
    road = np.zeros((n, n), dtype=bool)
    obstacle = np.zeros((n, n))
    lane = np.full((n, n), np.nan)
    cols = _band(n, c0, template.road_width)
    kind = template.kind

    if kind == "corridor":
        road[:, cols] = True
        lane[:, cols] = UP
    elif kind in ("t-junction", "four-way"):
        jr = r0 - offset
        rows = _band(n, jr, template.road_width)
        top = 0 if kind == "four-way" else jr - half
        road[top:, cols] = True
        lane[top:, cols] = UP
        road[rows, :] = True
        lane[rows, : cols.start] = LEFT
        lane[rows, cols.stop :] = RIGHT
        lane[rows, cols] = np.nan
    elif kind == "ring":
        # an annulus as wide as the road, thick enough to stay 4-connected,
        # whose bottom lane passes through the agent cell
        R = _ring_radius(template.road_width)
        cr = r0 - R
        rr, cc = np.mgrid[0:n, 0:n]
        d = np.hypot(rr - cr, cc - c0)
        ring = (d >= R - half - 0.75) & (d <= R + half + 0.75)
        island = d < R - half - 0.75
        road[ring] = True
        obstacle[island] = 1.0
        # counterclockwise in the (x, y) grid frame
        x, y = -(rr - cr), -(cc - c0)
        lane[ring] = np.arctan2(x, -y)[ring]
        road[r0:, cols] = True
        lane[r0 + 1 :, cols] = UP
        arm_rows = _band(n, cr, template.road_width)
        road[: cr - R + 1, cols] = True
        lane[: cr - R, cols] = UP
        road[arm_rows, : c0 - R + 1] = True
        lane[arm_rows, : c0 - R] = LEFT
        road[arm_rows, c0 + R :] = True
        lane[arm_rows, c0 + R + 1 :] = RIGHT
        lane[~road] = np.nan
    elif kind == "field":
        for _ in range(100):
            obs = rng.random((n, n)) < template.density
            obs[r0 - 1 : r0 + 2, c0 - 1 : c0 + 2] = False
            free = ~obs
            labels, _ = ndimage.label(free)
            comp = labels == labels[r0, c0]
            if np.any(comp & _exit_band(n, r0, half)):
                break
        else:  # pragma: no cover - density close to 1
            raise ValueError("could not place a connected obstacle field")
        road = free
        obstacle = obs.astype(float)
        lane = None
    if lane is not None:
        lane = np.where(np.isnan(lane), np.nan, np.mod(lane + np.pi, 2 * np.pi) - np.pi)
        lane = np.where(lane == -np.pi, np.pi, lane)
    channels = np.stack([road.astype(float), obstacle])
    return SceneGrid(channels, road, template.cell_size, CHANNELS, lane, agent_cell=(r0, c0))


def _exit_band(n, r0, half):
    edge = np.zeros((n, n), dtype=bool)
    edge[0, :] = edge[:, 0] = edge[:, -1] = True
    edge[r0 + half + 1 :, :] = False
    return edge


def exit_cells(scene: SceneGrid, road_width: int = 3) -> np.ndarray:
    """Drivable edge cells ahead of (or level with) the approach arm."""
    return scene.drivable & _exit_band(scene.height, scene.agent_cell[0], road_width // 2)


def true_rewards(scene: SceneGrid, road_width: int = 3) -> RewardGrids:
    """Hand-specified rewards: cheap road, forbidden off-road, goals at exits."""
    road = scene.drivable
    path = np.where(road, ROAD_PATH, -np.inf)
    goal = np.where(road, OTHER_GOAL, -np.inf)
    goal = np.where(exit_cells(scene, road_width), EXIT_GOAL, goal)
    return RewardGrids(path, goal)


@dataclass(frozen=True, eq=False)
class SynthAgent:
    """A generated agent: history in the agent frame, future points and its sampled plan."""

    track: TrackHistory
    future: np.ndarray
    plan: Plan
    speed: float
    accel: float


def _arc(t, v0, a):
    # distance travelled since t=0 with speed clamped at zero
    t = np.asarray(t, dtype=float)
    if a < 0:
        t_stop = -v0 / a
        tc = np.minimum(t, t_stop)
        return v0 * tc + 0.5 * a * tc * tc
    return v0 * t + 0.5 * a * t * t


def generate_tracks(
    scene: SceneGrid,
    true_rewards: RewardGrids,
    n_agents: int,
    speed_range,
    seed,
    *,
    N: int = 30,
    horizon: int = 12,
    history: int = 9,
    dt: float = 0.4,
    accel_range=(0.0, 0.0),
    noise: float | None = None,
) -> list[SynthAgent]:
    """Agents following plans sampled from the true policy.

    Future positions lie along a natural spline through the plan at arc
    length ``v0 t + a t^2 / 2`` (clamped at the last waypoint); the history
    is the straight approach along -x at the same kinematics.  Gaussian
    noise with ``noise`` standard deviation (default 0.05 cell sizes) is
    added to every position except the current one.
    """
    rng = np.random.default_rng(seed)
    noise = 0.05 * scene.cell_size if noise is None else float(noise)
    policy = solve_inferred(true_rewards, N)
    cells, lengths = sample_plan_arrays(policy, scene.agent_cell, n_agents, rng)
    plans = arrays_to_plans(cells, lengths, scene.width)
    lo, hi = speed_range
    alo, ahi = accel_range
    out = []
    t_fut = dt * np.arange(1, horizon + 1)
    t_hist = dt * np.arange(-(history - 1), 1)
    for plan in plans:
        v0 = float(rng.uniform(lo, hi))
        a = float(rng.uniform(alo, ahi)) if ahi > alo else float(alo)
        future = rollout_along_plan(plan, scene, _arc(t_fut, v0, a))
        # past kinematics, run backwards from t=0 and kept non-negative
        v_hist = np.maximum(v0 + a * t_hist, 0.0)
        x_hist = v0 * t_hist + 0.5 * a * t_hist * t_hist
        pos = np.column_stack([x_hist, np.zeros(history)])
        if noise > 0:
            future = future + rng.normal(0.0, noise, future.shape)
            jitter = rng.normal(0.0, noise, pos.shape)
            jitter[-1] = 0.0
            pos = pos + jitter
        track = TrackHistory(t_hist, pos, v_hist, np.full(history, a), np.zeros(history))
        out.append(SynthAgent(track, future, plan, v0, a))
    return out


# ------------------------------------------------------------------ benchmark


@dataclass
class BenchConfig:
    templates: tuple = ("corridor", "t-junction", "four-way", "ring", "field")
    size: int = 15
    cell_size: float = 2.0
    road_width: int = 3
    train_scenes: int = 40
    test_scenes: int = 20
    agents_per_scene: int = 16
    test_agents_per_scene: int = 4
    speed_range: tuple = (2.0, 5.0)
    accel_range: tuple = (-1.0, 1.0)
    noise: float | None = None
    N: int = 30
    horizon: int = 12
    history: int = 9
    dt: float = 0.4
    irl_epochs: int = 15
    irl_lr: float = 1e-2
    irl_batch: int = 8
    bc_epochs: int = 30
    bc_lr: float = 1e-2
    pretrain_steps: int = 3000
    minade_steps: int = 100
    trajgen_lr: float = 3e-3
    minade_lr: float = 1e-4
    trajgen_batch: int = 16
    n_plans: int = 200
    K_train: int = 10
    K: int = 10
    M: int = 200
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("templates", "speed_range", "accel_range"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        for t in cfg.templates:
            if t not in TEMPLATES:
                raise ValueError(f"unknown template {t!r}")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class BenchCase:
    scene: SceneGrid
    agent: SynthAgent
    split: str
    scene_seed: int


def scene_seeds(cfg: BenchConfig, split: str) -> list[int]:
    """Disjoint seed ranges: train below 10^6, test at or above it."""
    base = cfg.seed * 10_000_000 + (0 if split == "train" else 1_000_000)
    n = cfg.train_scenes if split == "train" else cfg.test_scenes
    return [base + i for i in range(n)]


def make_split(cfg: BenchConfig, split: str) -> list[BenchCase]:
    cases = []
    n_agents = cfg.agents_per_scene if split == "train" else cfg.test_agents_per_scene
    for i, s in enumerate(scene_seeds(cfg, split)):
        kind = cfg.templates[i % len(cfg.templates)]
        tmpl = SceneTemplate(kind, cfg.size, cfg.cell_size, cfg.road_width)
        scene = generate_scene(tmpl, s)
        agents = generate_tracks(
            scene,
            true_rewards(scene, cfg.road_width),
            n_agents,
            cfg.speed_range,
            s,
            N=cfg.N,
            horizon=cfg.horizon,
            history=cfg.history,
            dt=cfg.dt,
            accel_range=cfg.accel_range,
            noise=cfg.noise,
        )
        cases.extend(BenchCase(scene, a, split, s) for a in agents)
    return cases


@dataclass
class BenchResult:
    rows: list[dict]
    models: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)


def train_models(cfg: BenchConfig, cases: list[BenchCase]) -> tuple[dict, dict]:
    """Reward model, BC policy and trajectory generator trained on ``cases``."""
    import warnings

    from planmax.forecast import BCConfig, BCParams, train_bc
    from planmax.irl import IRLConfig, make_demonstration, train_irl
    from planmax.reward import RewardParams
    from planmax.trajgen import TrajGenConfig, TrajGenParams, TrajGenTrainConfig, TrajSample, train_trajgen

    demos, samples = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for c in cases:
            d = make_demonstration(c.scene, c.agent.track, c.agent.future, cfg.N)
            if d is None:
                continue
            demos.append(d)
            samples.append(TrajSample(c.agent.track, d.features, d.plan, c.agent.future))
    n_features = demos[0].features.dim
    irl = train_irl(
        demos,
        IRLConfig(N=cfg.N, lr=cfg.irl_lr, batch=cfg.irl_batch, epochs=cfg.irl_epochs, seed=cfg.seed),
        RewardParams.init(n_features, cfg.seed),
    )
    bc = train_bc(
        demos,
        BCConfig(lr=cfg.bc_lr, batch=cfg.irl_batch, epochs=cfg.bc_epochs, seed=cfg.seed),
        BCParams.init(n_features, cfg.seed),
    )
    tg_cfg = TrajGenConfig(
        scene_dim=2 * demos[0].features.n_channels,
        horizon=cfg.horizon,
        history=cfg.history,
        pos_scale=cfg.cell_size * cfg.size / 2,
    )
    tg = train_trajgen(
        samples,
        TrajGenTrainConfig(
            pretrain_steps=cfg.pretrain_steps,
            steps=cfg.minade_steps,
            batch=cfg.trajgen_batch,
            lr=cfg.trajgen_lr,
            n_plans=cfg.n_plans,
            K=cfg.K_train,
            N=cfg.N,
            seed=cfg.seed,
            minade_lr=cfg.minade_lr,
        ),
        TrajGenParams.init(tg_cfg, cfg.seed),
        reward_params=irl.params,
    )
    models = {"reward": irl.params, "bc": bc.params, "trajgen": tg.params}
    curves = {"irl": irl.curve, "bc": bc.curve, "trajgen": tg.curve}
    return models, curves


def evaluate_models(cfg: BenchConfig, models: dict, cases: list[BenchCase], variants=None) -> list[dict]:
    from planmax.forecast import VARIANTS, run_variant
    from planmax.metrics import EvalCase, report_row

    variants = VARIANTS if variants is None else variants
    rows = []
    for v in variants:
        evals = []
        for i, c in enumerate(cases):
            fs = run_variant(
                v,
                c.scene,
                c.agent.track,
                cfg.K,
                cfg.M,
                cfg.seed * 100_003 + i,
                reward=models.get("reward"),
                trajgen=models.get("trajgen"),
                bc=models.get("bc"),
                N=cfg.N,
                horizon=cfg.horizon,
                dt=cfg.dt,
            )
            evals.append(EvalCase(fs, c.agent.future, c.scene, 0.0))
        rows.append(report_row(v, evals))
        log.info("bench %s: %s", v, rows[-1])
    return rows


def run_benchmark(cfg: BenchConfig) -> BenchResult:
    """Train on generated train scenes and report metrics on unseen test scenes."""
    train = make_split(cfg, "train")
    test = make_split(cfg, "test")
    models, curves = train_models(cfg, train)
    rows = evaluate_models(cfg, models, test)
    return BenchResult(rows, models, curves)


__all__ = [
    "BenchConfig",
    "SceneTemplate",
    "SynthAgent",
    "TEMPLATES",
    "exit_cells",
    "generate_scene",
    "generate_tracks",
    "run_benchmark",
    "true_rewards",
]
