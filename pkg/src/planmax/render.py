"""Grayscale PGM (binary P5) renders of heat maps and forecast overlays."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from planmax.grid import SceneGrid

UNIFORM_GRAY = 128
ROAD_GRAY = 96
TRACK_WHITE = 255


def normalize(values) -> np.ndarray:
    """Linear map of the finite values to 0..255; -inf maps to 0, a constant grid to mid-gray."""
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    out = np.zeros(v.shape, dtype=np.uint8)
    if not finite.any():
        return out
    lo, hi = v[finite].min(), v[finite].max()
    if hi == lo:
        out[finite] = UNIFORM_GRAY
        return out
    out[finite] = np.rint((v[finite] - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def upscale(img: np.ndarray, scale: int) -> np.ndarray:
    if scale < 1:
        raise ValueError("scale must be >= 1")
    return np.kron(img, np.ones((scale, scale), dtype=img.dtype))


def heatmap(values, scale: int = 1) -> bytes:
    return pgm_bytes(upscale(normalize(values), scale))


def _grid(a) -> np.ndarray:
    return np.array([[-math.inf if v == "-inf" else v for v in row] for row in a], dtype=float)


def draw_polyline(img: np.ndarray, pixels, value: int = TRACK_WHITE):
    """Rasterize line segments between consecutive (row, col) pixel positions."""
    h, w = img.shape
    pts = np.asarray(pixels, dtype=float)
    for a, b in zip(pts[:-1], pts[1:]):
        n = int(math.ceil(np.abs(b - a).max())) + 1
        seg = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
        rc = np.floor(seg).astype(int)
        ok = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
        img[rc[ok, 0], rc[ok, 1]] = value
    return img


def forecast_overlay(scene: SceneGrid, trajectories, scale: int = 8) -> bytes:
    """Drivable cells in gray, each trajectory (from the origin) as a white polyline."""
    base = np.where(scene.drivable, ROAD_GRAY, 0).astype(np.uint8)
    img = upscale(base, scale)
    r0, c0 = scene.agent_cell
    for traj in trajectories:
        pts = np.vstack([[0.0, 0.0], np.asarray(traj, dtype=float)])
        rows = (r0 + 0.5 - pts[:, 0] / scene.cell_size) * scale
        cols = (c0 + 0.5 - pts[:, 1] / scene.cell_size) * scale
        draw_polyline(img, np.column_stack([rows, cols]))
    return pgm_bytes(img)


def render_artifact(kind: str, path, layer: str = "goal", scale=None, scene_path=None) -> bytes:
    """Render an svf/rewards JSON export or a forecast JSONL file."""
    text = Path(path).read_text()
    if kind in ("svf", "rewards"):
        d = json.loads(text)
        if d.get("kind") not in (None, kind):
            raise ValueError(f"{path} holds a {d.get('kind')!r} artifact, not {kind!r}")
        return heatmap(_grid(d[layer]), 1 if scale is None else scale)
    if kind == "forecast":
        from planmax.io import load_scene

        if scene_path is None:
            raise ValueError("forecast renders need --scene")
        scene = load_scene(scene_path)
        recs = [json.loads(l) for l in text.splitlines() if l.strip()]
        case = recs[0].get("case", 0) if recs else 0
        trajs = [r["points"] for r in recs if r.get("case", 0) == case]
        return forecast_overlay(scene, trajs, 8 if scale is None else scale)
    raise ValueError(f"unknown artifact kind {kind!r}")
