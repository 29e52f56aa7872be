"""Scene, track, dataset and checkpoint files.

Scene file: one JSON header line, then whitespace-separated row-major grids
in this order: every channel, the drivable mask, the lane direction field
(if ``has_lane_dir``; ``nan`` marks undefined cells) and the three agent
layers (if ``has_agents``).

Track file: JSON Lines of world-frame snapshots
``{track_id, t, x, y, vx, vy, ax, ay, yaw_rate}``.

Dataset directory: ``cases.jsonl`` with one record per prediction instance
``{scene, tracks, track_id, t0, split}``; paths are relative to the directory.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from planmax.grid import AgentFrame, SceneGrid, TrackHistory, WorldTrack

TRACK_FIELDS = ("track_id", "t", "x", "y", "vx", "vy", "ax", "ay", "yaw_rate")


def _fmt_grid(a) -> str:
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in np.asarray(a, dtype=float)) + "\n"


def dump_scene(scene: SceneGrid) -> str:
    has_lane = scene.lane_dir is not None
    has_agents = bool(np.any(scene.agents != 0))
    header = {
        "height": scene.height,
        "width": scene.width,
        "cell_size": scene.cell_size,
        "channels": list(scene.channel_names),
        "agent_cell": list(scene.agent_cell),
        "pose": [*scene.pose.origin, scene.pose.heading],
        "has_lane_dir": has_lane,
        "has_agents": has_agents,
    }
    parts = [json.dumps(header) + "\n"]
    parts += [_fmt_grid(c) for c in scene.channels]
    parts.append(_fmt_grid(scene.drivable.astype(float)))
    if has_lane:
        parts.append(_fmt_grid(scene.lane_dir))
    if has_agents:
        parts += [_fmt_grid(a) for a in scene.agents]
    return "".join(parts)


def parse_scene(text: str) -> SceneGrid:
    head, _, body = text.partition("\n")
    try:
        h = json.loads(head)
        H, W = int(h["height"]), int(h["width"])
        names = list(h["channels"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValueError(f"bad scene header: {e}") from None
    values = np.array(body.split(), dtype=float)
    n_planes = len(names) + 1 + bool(h.get("has_lane_dir")) + 3 * bool(h.get("has_agents"))
    if values.size != n_planes * H * W:
        raise ValueError(f"scene body holds {values.size} values, expected {n_planes * H * W}")
    planes = values.reshape(n_planes, H, W)
    C = len(names)
    k = C + 1
    lane = None
    if h.get("has_lane_dir"):
        lane = planes[k]
        k += 1
    agents = planes[k : k + 3] if h.get("has_agents") else None
    drivable = planes[C]
    if not np.all((drivable == 0) | (drivable == 1)):
        raise ValueError("drivable mask must be 0/1")
    pose = h.get("pose", [0.0, 0.0, 0.0])
    return SceneGrid(
        planes[:C],
        drivable.astype(bool),
        float(h.get("cell_size", 1.0)),
        tuple(names),
        lane,
        agents,
        tuple(h["agent_cell"]) if h.get("agent_cell") is not None else None,
        AgentFrame((pose[0], pose[1]), pose[2]),
    )


def save_scene(path, scene: SceneGrid):
    Path(path).write_text(dump_scene(scene))


def load_scene(path) -> SceneGrid:
    return parse_scene(Path(path).read_text())


def track_records(track_id: int, times, positions, velocities, accelerations, yaw_rate) -> list[dict]:
    return [
        {
            "track_id": int(track_id),
            "t": float(t),
            "x": float(p[0]),
            "y": float(p[1]),
            "vx": float(v[0]),
            "vy": float(v[1]),
            "ax": float(a[0]),
            "ay": float(a[1]),
            "yaw_rate": float(w),
        }
        for t, p, v, a, w in zip(times, positions, velocities, accelerations, yaw_rate)
    ]


def save_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def load_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for i, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{i}: {e}") from None
    return out


def load_tracks(path) -> dict[int, list[dict]]:
    tracks = defaultdict(list)
    for r in load_jsonl(path):
        missing = set(TRACK_FIELDS) - set(r)
        if missing:
            raise ValueError(f"track record missing {sorted(missing)}")
        tracks[int(r["track_id"])].append(r)
    for recs in tracks.values():
        recs.sort(key=lambda r: r["t"])
    return dict(tracks)


def world_track(records) -> WorldTrack:
    a = np.array([[r[k] for k in TRACK_FIELDS[1:]] for r in records], dtype=float).reshape(-1, 8)
    return WorldTrack(a[:, 0], a[:, 1:3], a[:, 3:5], a[:, 5:7], a[:, 7])


@dataclass(frozen=True, eq=False)
class Case:
    """One prediction instance loaded from a dataset directory."""

    scene: SceneGrid
    track: TrackHistory
    future: np.ndarray  # (T_f, 2) in the grid frame
    split: str
    name: str


def load_case(root, rec: dict) -> Case:
    root = Path(root)
    scene = load_scene(root / rec["scene"])
    tracks = load_tracks(root / rec["tracks"])
    tid = int(rec["track_id"])
    if tid not in tracks:
        raise ValueError(f"track {tid} not in {rec['tracks']}")
    t0 = float(rec.get("t0", 0.0))
    recs = tracks[tid]
    past = [r for r in recs if r["t"] <= t0 + 1e-9]
    fut = [r for r in recs if r["t"] > t0 + 1e-9]
    if not past:
        raise ValueError(f"track {tid} has no samples at or before t0")
    wt = world_track(past)
    track = wt.to_history()
    future = scene.world_to_grid(np.array([[r["x"], r["y"]] for r in fut], dtype=float).reshape(-1, 2))
    name = rec.get("name", f"{rec['scene']}#{tid}")
    return Case(scene, track, future, rec.get("split", "train"), name)


def load_dataset(root, split: str | None = None) -> list[Case]:
    root = Path(root)
    index = root / "cases.jsonl" if root.is_dir() else root
    if not index.exists():
        raise FileNotFoundError(f"no dataset index at {index}")
    recs = load_jsonl(index)
    cases = [load_case(index.parent, r) for r in recs if split is None or r.get("split", "train") == split]
    return cases


def write_dataset(root, cases_by_scene):
    """Write synthetic cases: ``cases_by_scene`` maps a scene name to (scene, agents, split)."""
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "tracks").mkdir(parents=True, exist_ok=True)
    index = []
    for name, (scene, agents, split) in cases_by_scene.items():
        save_scene(root / "scenes" / f"{name}.txt", scene)
        recs = []
        for i, a in enumerate(agents):
            tr = a.track
            dt = float(tr.times[1] - tr.times[0]) if len(tr.times) > 1 else 0.4
            t_fut = dt * np.arange(1, len(a.future) + 1)
            heading = np.zeros(len(tr.times))
            vel = np.column_stack([tr.speed * np.cos(heading), tr.speed * np.sin(heading)])
            acc = np.column_stack([tr.accel, np.zeros(len(tr.times))])
            world = scene.grid_to_world(tr.positions)
            fut_world = scene.grid_to_world(a.future)
            rot = scene.pose.heading
            c, s = np.cos(rot), np.sin(rot)
            R = np.array([[c, -s], [s, c]])
            recs += track_records(i, tr.times, world, vel @ R.T, acc @ R.T, tr.yaw_rate)
            zeros = np.zeros((len(t_fut), 2))
            recs += track_records(i, t_fut, fut_world, zeros, zeros, np.zeros(len(t_fut)))
            index.append({"scene": f"scenes/{name}.txt", "tracks": f"tracks/{name}.jsonl", "track_id": i, "t0": 0.0, "split": split})
        save_jsonl(root / "tracks" / f"{name}.jsonl", recs)
    save_jsonl(root / "cases.jsonl", index)


# ------------------------------------------------------------------ checkpoints


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=None, separators=(",", ":")) + "\n"


def save_checkpoint(path, model, adam=None, extra: dict | None = None):
    d = {"model": model.to_json()}
    if adam is not None:
        d["adam"] = adam.to_json()
    if extra:
        d.update(extra)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(dump_json(d))
    os.replace(tmp, path)


def load_model(d: dict):
    from planmax.forecast import BCParams
    from planmax.reward import RewardParams
    from planmax.trajgen import TrajGenParams

    kinds = {"reward-mlp": RewardParams, "trajgen": TrajGenParams, "bc-mlp": BCParams}
    kind = d.get("kind")
    if kind not in kinds:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    return kinds[kind].from_json(d)


def load_checkpoint(path):
    """(model, adam state or None, raw dict)."""
    from planmax.optim import AdamState

    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not a checkpoint ({e})") from None
    if "model" not in d:
        raise ValueError(f"{path}: not a checkpoint")
    adam = AdamState.from_json(d["adam"]) if "adam" in d else None
    return load_model(d["model"]), adam, d


def curve_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()
