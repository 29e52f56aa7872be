"""Scene grids, agent-centric frames and grid demonstrations.

Grid convention: the grid's local frame is the agent frame of the agent the
scene was cropped around.  Row index decreases along +x (ahead is "up" in
the raster) and column index decreases along +y (left is left), so the
center of cell ``(r, c)`` sits at ``((r0 - r) * cell_size, (c0 - c) * cell_size)``
where ``(r0, c0)`` is the agent cell.  A point belongs to the cell whose
continuous index interval ``[k, k + 1)`` contains it, so points exactly on a
boundary go to the cell of the floor index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

PATH = "path"
GOAL = "goal"

# Heading fallbacks for near-stationary agents.
MIN_SPEED = 0.1
MIN_DISPLACEMENT = 0.1


class PlanTruncatedWarning(UserWarning):
    """A track left the grid; the demonstration was cut at the last in-grid point."""


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AgentFrame:
    """World pose of an agent-centric frame."""

    origin: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def _rot(self):
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s], [s, c]])

    def to_agent(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float) - np.asarray(self.origin)
        return p @ self._rot()

    def to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self._rot().T + np.asarray(self.origin)


@dataclass(frozen=True, eq=False)
class WorldTrack:
    """Raw track snapshots in world coordinates, chronological, last at t=0."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    yaw_rate: np.ndarray

    def __post_init__(self):
        for name in ("times", "positions", "velocities", "accelerations", "yaw_rate"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if len(self.times) == 0:
            raise ValueError("track must contain at least one sample")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("track samples must be strictly chronological")

    def to_history(self, frame: AgentFrame | None = None) -> "TrackHistory":
        frame = build_agent_frame(self) if frame is None else frame
        pos = frame.to_agent(self.positions)
        speed = np.linalg.norm(self.velocities, axis=1)
        # longitudinal acceleration along the direction of travel
        dirs = np.where(
            speed[:, None] >= MIN_SPEED,
            self.velocities / np.maximum(speed, 1e-300)[:, None],
            np.array([math.cos(frame.heading), math.sin(frame.heading)]),
        )
        accel = np.sum(self.accelerations * dirs, axis=1)
        return TrackHistory(self.times - self.times[-1], pos, speed, accel, self.yaw_rate, frame)


@dataclass(frozen=True, eq=False)
class TrackHistory:
    """Past motion in the agent frame, sampled at fixed steps ending at t=0."""

    times: np.ndarray
    positions: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    yaw_rate: np.ndarray
    frame: AgentFrame = field(default_factory=AgentFrame)

    def __post_init__(self):
        for name in ("times", "positions", "speed", "accel", "yaw_rate"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if len(self.times) == 0:
            raise ValueError("track history needs the t=0 sample")
        if np.any(self.speed < 0):
            raise ValueError("speeds must be non-negative")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("track samples must be chronological")

    @property
    def current_speed(self) -> float:
        return float(self.speed[-1])

    def inputs(self) -> np.ndarray:
        """Per-sample motion inputs ``[x, y, |v|, a, yaw_rate]``, shape (T, 5)."""
        return np.column_stack([self.positions, self.speed, self.accel, self.yaw_rate])


def build_agent_frame(track: WorldTrack) -> AgentFrame:
    """Agent frame at t=0: origin at the current position, x along the motion."""
    origin = track.positions[-1]
    v = track.velocities[-1]
    if math.hypot(v[0], v[1]) >= MIN_SPEED:
        heading = math.atan2(v[1], v[0])
    else:
        d = track.positions[-1] - track.positions[0]
        heading = math.atan2(d[1], d[0]) if math.hypot(d[0], d[1]) >= MIN_DISPLACEMENT else 0.0
    return AgentFrame((origin[0], origin[1]), heading)


@dataclass(frozen=True)
class GridState:
    kind: str
    row: int
    col: int


@dataclass(frozen=True)
class Plan:
    """Path cells visited in order; the goal state sits at the last path cell."""

    cells: tuple[tuple[int, int], ...]

    def __post_init__(self):
        cells = tuple((int(r), int(c)) for r, c in self.cells)
        if not cells:
            raise ValueError("a plan needs at least one path state")
        for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
            if abs(r0 - r1) + abs(c0 - c1) != 1:
                raise ValueError(f"path states {(r0, c0)} -> {(r1, c1)} are not 4-adjacent")
        object.__setattr__(self, "cells", cells)

    @property
    def goal(self) -> tuple[int, int]:
        return self.cells[-1]

    @property
    def states(self) -> tuple[GridState, ...]:
        return tuple(GridState(PATH, r, c) for r, c in self.cells) + (GridState(GOAL, *self.goal),)

    def __len__(self) -> int:
        return len(self.cells) + 1

    @classmethod
    def from_states(cls, states: Sequence[GridState]) -> "Plan":
        if len(states) < 2 or states[-1].kind != GOAL:
            raise ValueError("a plan ends in a goal state")
        if any(s.kind != PATH for s in states[:-1]):
            raise ValueError("only the last state may be a goal state")
        if (states[-1].row, states[-1].col) != (states[-2].row, states[-2].col):
            raise ValueError("the goal state must share the final path cell")
        return cls(tuple((s.row, s.col) for s in states[:-1]))

    def in_grid(self, height: int, width: int) -> bool:
        return all(0 <= r < height and 0 <= c < width for r, c in self.cells)


@dataclass(frozen=True, eq=False)
class SceneGrid:
    """Rasterized scene around an agent.

    ``channels`` is (C, H, W) with values in [0, 1]; ``lane_dir`` holds the
    direction of travel in the grid frame (NaN where undefined); ``agents``
    is an optional (3, H, W) surrounding-agent layer (speed, acceleration,
    yaw rate at occupied cells).  ``pose`` places the grid frame in the world.
    """

    channels: np.ndarray
    drivable: np.ndarray
    cell_size: float = 1.0
    channel_names: tuple[str, ...] = ()
    lane_dir: np.ndarray | None = None
    agents: np.ndarray | None = None
    agent_cell: tuple[int, int] | None = None
    pose: AgentFrame = field(default_factory=AgentFrame)

    def __post_init__(self):
        ch = np.array(self.channels, dtype=float)
        if ch.ndim == 2:
            ch = ch[None]
        if ch.ndim != 3 or ch.shape[1] < 1 or ch.shape[2] < 1:
            raise ValueError("channels must be (C, H, W) with H, W >= 1")
        if not np.all(np.isfinite(ch)):
            raise ValueError("channel values must be finite")
        h, w = ch.shape[1:]
        drivable = np.array(self.drivable, dtype=bool)
        if drivable.shape != (h, w):
            raise ValueError("drivable mask shape mismatch")
        object.__setattr__(self, "channels", _frozen(ch))
        object.__setattr__(self, "drivable", _frozen(drivable, bool))
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        object.__setattr__(self, "cell_size", float(self.cell_size))
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(ch.shape[0]))
        if len(names) != ch.shape[0]:
            raise ValueError("one name per channel")
        object.__setattr__(self, "channel_names", names)
        if self.lane_dir is not None:
            lane = np.array(self.lane_dir, dtype=float)
            if lane.shape != (h, w):
                raise ValueError("lane_dir shape mismatch")
            ok = np.isnan(lane) | ((lane > -np.pi) & (lane <= np.pi))
            if not np.all(ok):
                raise ValueError("lane directions must lie in (-pi, pi]")
            object.__setattr__(self, "lane_dir", _frozen(lane))
        agents = np.zeros((3, h, w)) if self.agents is None else np.array(self.agents, dtype=float)
        if agents.shape != (3, h, w):
            raise ValueError("agents layer must be (3, H, W)")
        object.__setattr__(self, "agents", _frozen(agents))
        cell = (h // 2, w // 2) if self.agent_cell is None else tuple(int(v) for v in self.agent_cell)
        if not (0 <= cell[0] < h and 0 <= cell[1] < w):
            raise ValueError("agent cell outside grid")
        object.__setattr__(self, "agent_cell", cell)

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def has_lanes(self) -> bool:
        return self.lane_dir is not None and bool(np.any(~np.isnan(self.lane_dir)))

    def cell_centers(self) -> np.ndarray:
        """Grid-frame centers of every cell, shape (H, W, 2)."""
        r0, c0 = self.agent_cell
        rows = (r0 - np.arange(self.height)) * self.cell_size
        cols = (c0 - np.arange(self.width)) * self.cell_size
        xs, ys = np.meshgrid(rows, cols, indexing="ij")
        return np.stack([xs, ys], axis=-1)

    def cell_center(self, row: int, col: int) -> np.ndarray:
        r0, c0 = self.agent_cell
        return np.array([(r0 - row) * self.cell_size, (c0 - col) * self.cell_size])

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Cell indices of grid-frame points (may be out of bounds)."""
        p = np.asarray(points, dtype=float)
        r0, c0 = self.agent_cell
        rows = np.floor(r0 + 0.5 - p[..., 0] / self.cell_size).astype(np.int64)
        cols = np.floor(c0 + 0.5 - p[..., 1] / self.cell_size).astype(np.int64)
        return rows, cols

    def in_bounds(self, rows, cols) -> np.ndarray:
        rows, cols = np.asarray(rows), np.asarray(cols)
        return (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)

    def world_to_grid(self, points) -> np.ndarray:
        return self.pose.to_agent(points)

    def grid_to_world(self, points) -> np.ndarray:
        return self.pose.to_world(points)


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Per-cell features ``[channels, 3x3 channel means, |v|, x, y]``."""

    values: np.ndarray
    n_channels: int
    agents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "agents", _frozen(self.agents))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def scene(self) -> np.ndarray:
        """Scene part (raw channels and neighborhood means), (H, W, 2C)."""
        return self.values[..., : 2 * self.n_channels]

    @property
    def coords(self) -> np.ndarray:
        return self.values[..., -2:]

    def flat(self) -> np.ndarray:
        h, w, d = self.values.shape
        return self.values.reshape(h * w, d)


def neighborhood_mean(channels: np.ndarray) -> np.ndarray:
    """3x3 mean of each (H, W) plane with zero padding."""
    return np.stack(
        [ndimage.uniform_filter(c, size=3, mode="constant", cval=0.0) for c in channels]
    )


def assemble_features(grid: SceneGrid, track: TrackHistory) -> FeatureGrid:
    """Stack scene and motion feature maps for the reward model."""
    centers = grid.cell_centers()
    if grid.pose != track.frame:
        centers = track.frame.to_agent(grid.grid_to_world(centers))
    speed = np.full(grid.shape, track.current_speed)
    planes = [
        *grid.channels,
        *neighborhood_mean(grid.channels),
        speed,
        centers[..., 0],
        centers[..., 1],
    ]
    values = np.stack(planes, axis=-1)
    return FeatureGrid(values, grid.n_channels, np.moveaxis(grid.agents, 0, -1))


def _connect(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """4-connected cells strictly after ``a`` up to ``b``; rows move first."""
    out = []
    r, c = a
    step = 1 if b[0] > r else -1
    while r != b[0]:
        r += step
        out.append((r, c))
    step = 1 if b[1] > c else -1
    while c != b[1]:
        c += step
        out.append((r, c))
    return out


def rasterize_track_to_plan(points, grid: SceneGrid) -> Plan:
    """Convert grid-frame points (first one in the agent cell) to a plan.

    Points past the grid edge end the demonstration at the last in-grid point
    and raise a :class:`PlanTruncatedWarning`.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rows, cols = grid.locate(pts)
    inside = grid.in_bounds(rows, cols)
    if (int(rows[0]), int(cols[0])) != grid.agent_cell:
        raise ValueError("the first point must lie in the agent cell")
    n = len(pts)
    if not inside.all():
        n = int(np.argmin(inside))
        warnings.warn(
            f"track leaves the grid at point {n}; demonstration truncated",
            PlanTruncatedWarning,
            stacklevel=2,
        )
    cells = [grid.agent_cell]
    for r, c in zip(rows[1:n], cols[1:n]):
        cell = (int(r), int(c))
        if cell != cells[-1]:
            cells.extend(_connect(cells[-1], cell))
    return Plan(tuple(cells))
