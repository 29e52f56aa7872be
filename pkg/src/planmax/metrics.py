"""Displacement, miss, off-road and off-yaw metrics for multimodal forecasts.

Forecast sets are ordered by decreasing cluster size, so the ``K``-limited
metrics use the first K trajectories.  Points are in the grid (agent) frame.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from planmax.grid import SceneGrid, wrap_angle

MISS_THRESHOLD = 2.0
YAW_THRESHOLD = math.pi / 4
STATIONARY = 1e-6

REPORT_COLUMNS = ("variant", "minade_5", "minade_10", "minfde_5", "minfde_10", "mr_5_2", "mr_10_2", "offroad", "offyaw")


def _trajs(forecast, K=None) -> np.ndarray:
    t = getattr(forecast, "trajectories", forecast)
    t = np.asarray(t, dtype=float)
    if t.ndim == 2:
        t = t[None]
    if len(t) == 0:
        raise ValueError("empty forecast")
    return t if K is None else t[:K]


def _check(t, gt):
    gt = np.asarray(gt, dtype=float)
    if t.shape[1:] != gt.shape:
        raise ValueError(f"horizon mismatch: forecast {t.shape[1:]} vs ground truth {gt.shape}")
    return gt


def min_ade(forecast, gt, K=None) -> float:
    t = _trajs(forecast, K)
    gt = _check(t, gt)
    return float(np.linalg.norm(t - gt, axis=-1).mean(axis=1).min())


def min_fde(forecast, gt, K=None) -> float:
    t = _trajs(forecast, K)
    gt = _check(t, gt)
    return float(np.linalg.norm(t[:, -1] - gt[-1], axis=-1).min())


def is_miss(forecast, gt, K=None, threshold: float = MISS_THRESHOLD) -> bool:
    """True when no trajectory stays within ``threshold`` over the whole horizon."""
    t = _trajs(forecast, K)
    gt = _check(t, gt)
    worst = np.linalg.norm(t - gt, axis=-1).max(axis=1)
    return bool(np.all(worst > threshold))


@dataclass(frozen=True, eq=False)
class EvalCase:
    forecast: object  # ForecastSet or (K, T_f, 2) array
    ground_truth: np.ndarray
    scene: SceneGrid | None = None
    heading: float = 0.0  # initial heading in the grid frame


def miss_rate(cases, K=None, threshold: float = MISS_THRESHOLD) -> float:
    cases = list(cases)
    if not cases:
        raise ValueError("no cases")
    return sum(is_miss(c.forecast, c.ground_truth, K, threshold) for c in cases) / len(cases)


def offroad_points(scene: SceneGrid, points) -> np.ndarray:
    """Boolean mask of points on non-drivable cells or outside the grid."""
    rows, cols = scene.locate(points)
    inside = scene.in_bounds(rows, cols)
    on = np.zeros(rows.shape, dtype=bool)
    on[inside] = scene.drivable[rows[inside], cols[inside]]
    return ~on


def offroad_rate(cases, K=None) -> float:
    off = total = 0
    for c in cases:
        pts = _trajs(c.forecast, K).reshape(-1, 2)
        off += int(offroad_points(c.scene, pts).sum())
        total += len(pts)
    if total == 0:
        raise ValueError("no points")
    return off / total


def headings(traj, initial: float) -> np.ndarray:
    """Heading of each point: first from ``initial``, then from the previous point.

    Steps shorter than 1e-6 keep the previous heading.
    """
    traj = np.asarray(traj, dtype=float)
    out = np.empty(len(traj))
    h = initial
    for t in range(len(traj)):
        if t > 0:
            d = traj[t] - traj[t - 1]
            if math.hypot(d[0], d[1]) >= STATIONARY:
                h = math.atan2(d[1], d[0])
        out[t] = h
    return out


def nearest_lane(scene: SceneGrid, points) -> np.ndarray:
    """Lane direction of the nearest lane cell per point (ties: lower row, then column)."""
    lane = scene.lane_dir
    idx = np.flatnonzero(~np.isnan(lane.ravel()))
    centers = scene.cell_centers().reshape(-1, 2)[idx]
    pts = np.atleast_2d(points)
    d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=-1)
    return lane.ravel()[idx[np.argmin(d2, axis=1)]]


def offyaw_points(scene: SceneGrid, traj, initial: float = 0.0) -> np.ndarray:
    h = headings(traj, initial)
    dev = np.abs(wrap_angle(h - nearest_lane(scene, traj)))
    return dev > YAW_THRESHOLD


def offyaw_rate(cases, K=None) -> float | None:
    """Fraction of off-yaw points; ``None`` when no scene has a lane field."""
    off = total = 0
    for c in cases:
        if c.scene is None or not c.scene.has_lanes:
            continue
        for traj in _trajs(c.forecast, K):
            m = offyaw_points(c.scene, traj, c.heading)
            off += int(m.sum())
            total += len(m)
    return None if total == 0 else off / total


def report_row(variant: str, cases) -> dict:
    """One metric-report row; off-road and off-yaw use every forecast trajectory."""
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to evaluate")
    row = {"variant": variant}
    for k in (5, 10):
        row[f"minade_{k}"] = float(np.mean([min_ade(c.forecast, c.ground_truth, k) for c in cases]))
        row[f"minfde_{k}"] = float(np.mean([min_fde(c.forecast, c.ground_truth, k) for c in cases]))
        row[f"mr_{k}_2"] = miss_rate(cases, k)
    with_scene = [c for c in cases if c.scene is not None]
    row["offroad"] = offroad_rate(with_scene) if with_scene else None
    row["offyaw"] = offyaw_rate(with_scene)
    return row


def _fmt(v):
    if v is None:
        return ""
    return v if isinstance(v, str) else repr(float(v))


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()
