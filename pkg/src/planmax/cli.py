"""Command-line entry point: ``planmax <command> [options]``.

Every command reads JSON configs (unknown keys are rejected) and writes
deterministic output for a fixed seed.  ``PLANMAX_SEED`` overrides the seed
of any config.  ``--threads`` caps BLAS threads and must be given before
numerical work starts, so heavy imports happen inside the commands.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("planmax")


class CLIError(Exception):
    pass


def _read_config(path, allowed: dict) -> dict:
    """Merge a JSON config over ``allowed`` defaults, rejecting unknown keys."""
    cfg = dict(allowed)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CLIError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise CLIError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise CLIError(f"config {path} must hold a JSON object")
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise CLIError(f"unknown config keys in {path}: {', '.join(unknown)}")
        cfg.update(data)
    if "seed" in cfg and os.environ.get("PLANMAX_SEED"):
        try:
            cfg["seed"] = int(os.environ["PLANMAX_SEED"])
        except ValueError:
            raise CLIError("PLANMAX_SEED must be an integer") from None
    return cfg


def _write(path, text: str):
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _train_cases(data, split):
    from planmax.io import load_dataset

    try:
        cases = load_dataset(data, split)
    except FileNotFoundError as e:
        raise CLIError(str(e)) from None
    if not cases:
        raise CLIError(f"dataset {data} has no cases in split {split!r}")
    return cases


def _demos(cases, N):
    import warnings

    from planmax.irl import make_demonstration

    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for c in cases:
            d = make_demonstration(c.scene, c.track, c.future, N)
            if d is not None:
                out.append((c, d))
    if not out:
        raise CLIError("no demonstration fits within the horizon N")
    return out


def _resume(path, kind):
    from planmax.io import load_checkpoint

    model, adam, raw = load_checkpoint(path)
    if type(model).__name__ != kind:
        raise CLIError(f"{path} holds a {type(model).__name__}, expected {kind}")
    return model, adam, raw


# --------------------------------------------------------------------- commands

IRL_KEYS = {"N": 50, "lr": 1e-4, "batch": 8, "epochs": 10, "seed": 0, "hidden": 32}


def cmd_train_irl(args):
    from planmax.io import curve_csv, save_checkpoint
    from planmax.irl import IRLConfig, train_irl
    from planmax.reward import RewardParams

    cfg = _read_config(args.config, IRL_KEYS)
    demos = [d for _, d in _demos(_train_cases(args.data, args.split), cfg["N"])]
    done = 0
    adam = None
    if args.resume:
        params, adam, raw = _resume(args.resume, "RewardParams")
        done = int(raw.get("epochs_done", 0))
    else:
        params = RewardParams.init(demos[0].features.dim, cfg["seed"], cfg["hidden"])
    conf = IRLConfig(N=cfg["N"], lr=cfg["lr"], batch=cfg["batch"], epochs=cfg["epochs"], seed=cfg["seed"] + done)
    res = train_irl(demos, conf, params, adam=adam)
    save_checkpoint(args.out, res.params, res.adam, {"epochs_done": done + cfg["epochs"], "config": cfg})
    if args.curve:
        rows = [{**r, "epoch": r["epoch"] + done} for r in res.curve if not (done and r["epoch"] == 0)]
        _write(args.curve, curve_csv(rows, ("epoch", "train_nll", "heldout_nll", "oracle_nll")))
    print(f"trained reward model on {len(demos)} demonstrations; final train NLL {res.curve[-1]['train_nll']:.6f}")


BC_KEYS = {"N": 50, "lr": 1e-4, "batch": 8, "epochs": 10, "seed": 0, "hidden": 32}


def cmd_train_bc(args):
    from planmax.forecast import BCConfig, BCParams, train_bc
    from planmax.io import curve_csv, save_checkpoint

    cfg = _read_config(args.config, BC_KEYS)
    demos = [d for _, d in _demos(_train_cases(args.data, args.split), cfg["N"])]
    done = 0
    adam = None
    if args.resume:
        params, adam, raw = _resume(args.resume, "BCParams")
        done = int(raw.get("epochs_done", 0))
    else:
        params = BCParams.init(demos[0].features.dim, cfg["seed"], cfg["hidden"])
    conf = BCConfig(lr=cfg["lr"], batch=cfg["batch"], epochs=cfg["epochs"], seed=cfg["seed"] + done)
    res = train_bc(demos, conf, params, adam=adam)
    save_checkpoint(args.out, res.params, res.adam, {"epochs_done": done + cfg["epochs"], "config": cfg})
    if args.curve:
        rows = [{**r, "epoch": r["epoch"] + done} for r in res.curve]
        _write(args.curve, curve_csv(rows, ("epoch", "train_ce")))
    print(f"trained BC policy on {len(demos)} demonstrations; final CE {res.curve[-1]['train_ce']:.6f}")


TRAJGEN_KEYS = {
    "pretrain_steps": 2000,
    "steps": 0,
    "batch": 8,
    "lr": 1e-4,
    "minade_lr": None,
    "n_plans": 200,
    "K": 20,
    "N": 50,
    "seed": 0,
    "horizon": 12,
    "history": 9,
    "hidden": 32,
    "pos_scale": 10.0,
}


def cmd_train_trajgen(args):
    from planmax.io import curve_csv, load_checkpoint, save_checkpoint
    from planmax.trajgen import TrajGenConfig, TrajGenParams, TrajGenTrainConfig, TrajSample, train_trajgen

    cfg = _read_config(args.config, TRAJGEN_KEYS)
    pairs = _demos(_train_cases(args.data, args.split), cfg["N"])
    samples = []
    for c, d in pairs:
        if len(c.future) != cfg["horizon"]:
            raise CLIError(f"case {c.name} has {len(c.future)} future points, config horizon is {cfg['horizon']}")
        samples.append(TrajSample(c.track, d.features, d.plan, c.future))
    reward = None
    if args.reward:
        reward, _, _ = load_checkpoint(args.reward)
        if type(reward).__name__ != "RewardParams":
            raise CLIError(f"{args.reward} is not a reward checkpoint")
    if cfg["steps"] > 0 and reward is None:
        raise CLIError("stage-2 training (steps > 0) needs --reward")
    adam = None
    if args.resume:
        params, adam, _ = _resume(args.resume, "TrajGenParams")
    else:
        arch = TrajGenConfig(
            scene_dim=2 * pairs[0][1].features.n_channels,
            horizon=cfg["horizon"],
            history=cfg["history"],
            hidden=cfg["hidden"],
            pos_scale=cfg["pos_scale"],
        )
        params = TrajGenParams.init(arch, cfg["seed"])
    start = 0 if adam is None else adam.step
    tconf = TrajGenTrainConfig(
        pretrain_steps=cfg["pretrain_steps"],
        steps=cfg["steps"],
        batch=cfg["batch"],
        lr=cfg["lr"],
        n_plans=cfg["n_plans"],
        K=cfg["K"],
        N=cfg["N"],
        seed=cfg["seed"] + start,
        minade_lr=cfg["minade_lr"],
    )
    res = train_trajgen(samples, tconf, params, reward, adam)
    save_checkpoint(args.out, res.params, res.adam, {"config": cfg})
    if args.curve:
        _write(args.curve, curve_csv(res.curve, ("step", "stage", "loss")))
    last = res.curve[-1]["loss"] if res.curve else float("nan")
    print(f"trained trajectory generator to step {res.adam.step}; last loss {last:.6f}")


def _forecast_cases(args):
    from planmax.io import Case, load_dataset, load_scene, load_tracks, world_track

    if args.data:
        try:
            cases = load_dataset(args.data, args.split)
        except FileNotFoundError as e:
            raise CLIError(str(e)) from None
        if not cases:
            raise CLIError(f"dataset {args.data} has no cases in split {args.split!r}")
        return cases
    if not (args.scene and args.tracks):
        raise CLIError("give --data or both --scene and --tracks")
    for p in (args.scene, args.tracks):
        if not Path(p).exists():
            raise CLIError(f"file not found: {p}")
    import numpy as np

    scene = load_scene(args.scene)
    tracks = load_tracks(args.tracks)
    if args.track_id not in tracks:
        raise CLIError(f"track {args.track_id} not found in {args.tracks}")
    past = [r for r in tracks[args.track_id] if r["t"] <= args.t0 + 1e-9]
    if not past:
        raise CLIError("no track samples at or before t0")
    return [Case(scene, world_track(past).to_history(), np.zeros((0, 2)), "", args.scene)]


def _load_for_variant(args):
    from planmax.io import load_checkpoint

    need = {"P2T_IRL": ("reward", "trajgen"), "P2T_CS": ("reward",), "P2T_BC": ("bc", "trajgen"), "CV": ()}
    expect = {"reward": "RewardParams", "trajgen": "TrajGenParams", "bc": "BCParams"}
    models = {}
    for key in need[args.variant]:
        path = getattr(args, key)
        if not path:
            raise CLIError(f"variant {args.variant} needs --{key}")
        if not Path(path).exists():
            raise CLIError(f"checkpoint not found: {path}")
        model, _, _ = load_checkpoint(path)
        if type(model).__name__ != expect[key]:
            raise CLIError(f"--{key} {path} holds a {type(model).__name__}; variant {args.variant} needs {expect[key]}")
        models[key] = model
    return models


def cmd_forecast(args):
    import numpy as np

    from planmax.forecast import run_variant
    from planmax.grid import assemble_features
    from planmax.trajgen import decode_trajectory, encode_motion, encode_plan

    models = _load_for_variant(args)
    cases = _forecast_cases(args)
    seed = int(os.environ.get("PLANMAX_SEED", args.seed))
    horizon = args.horizon
    if "trajgen" in models:
        horizon = models["trajgen"].config.horizon
    lines = []
    att_rows = []
    for i, c in enumerate(cases):
        fs = run_variant(
            args.variant, c.scene, c.track, args.K, args.M, seed * 100_003 + i,
            reward=models.get("reward"), trajgen=models.get("trajgen"), bc=models.get("bc"),
            N=args.N, horizon=horizon, dt=args.dt,
        )
        for rec in fs.records():
            lines.append(json.dumps({"case": i, **rec}) + "\n")
        if args.attention_csv and "trajgen" in models and fs.plans:
            tg = models["trajgen"]
            feats = assemble_features(c.scene, c.track)
            h = encode_motion(c.track, tg)
            for k, plan in enumerate(fs.plans):
                _, alpha = decode_trajectory(h, encode_plan(plan, feats, tg), tg)
                for t, row in enumerate(alpha, start=2):
                    for n, a in enumerate(row):
                        att_rows.append(f"{i},{k},{t},{n},{repr(float(a))}\n")
    _write(args.out, "".join(lines))
    if args.attention_csv:
        _write(args.attention_csv, "case,k_index,step,plan_state,weight\n" + "".join(att_rows))
    print(f"wrote {len(lines)} forecast records for {len(cases)} case(s) to {args.out}")


def cmd_evaluate(args):
    from collections import defaultdict

    from planmax.forecast import ForecastSet
    from planmax.io import load_dataset, load_jsonl
    from planmax.metrics import EvalCase, report_csv, report_row

    for p in (args.forecasts,):
        if not Path(p).exists():
            raise CLIError(f"file not found: {p}")
    try:
        cases = load_dataset(args.data, args.split)
    except FileNotFoundError as e:
        raise CLIError(str(e)) from None
    if not cases:
        raise CLIError("dataset is empty")
    by_variant = defaultdict(lambda: defaultdict(list))
    for r in load_jsonl(args.forecasts):
        by_variant[r["variant"]][int(r.get("case", 0))].append(r)
    if not by_variant:
        raise CLIError("no forecasts to evaluate")
    rows = []
    for variant in sorted(by_variant):
        evals = []
        for idx, recs in sorted(by_variant[variant].items()):
            if not 0 <= idx < len(cases):
                raise CLIError(f"forecast refers to case {idx}, dataset has {len(cases)}")
            c = cases[idx]
            evals.append(EvalCase(ForecastSet.from_records(recs), c.future, c.scene, 0.0))
        try:
            rows.append(report_row(variant, evals))
        except ValueError as e:
            raise CLIError(str(e)) from None
    _write(args.out, report_csv(rows))
    print(f"wrote metrics for {len(rows)} variant(s) to {args.out}")


def cmd_solve(args):
    from planmax.grid import assemble_features
    from planmax.io import dump_json, load_checkpoint
    from planmax.maxent import propagate_inferred, solve_inferred

    case = _forecast_cases(args)[0]
    model, _, _ = load_checkpoint(args.reward)
    if type(model).__name__ != "RewardParams":
        raise CLIError(f"{args.reward} is not a reward checkpoint")
    r = model.forward(assemble_features(case.scene, case.track))
    if args.rewards_out:
        _write(args.rewards_out, dump_json({"kind": "rewards", "path": _jsonable(r.path), "goal": _jsonable(r.goal)}))
    if args.svf_out:
        svf = propagate_inferred(solve_inferred(r, args.N), case.scene.agent_cell)
        _write(args.svf_out, dump_json({"kind": "svf", **svf.to_json()}))
    print("done")


def _jsonable(a):
    import math

    return [[v if math.isfinite(v) else "-inf" for v in row] for row in a.tolist()]


def cmd_render(args):
    from planmax import render

    try:
        data = render.render_artifact(args.artifact, args.input, layer=args.layer, scale=args.scale, scene_path=args.scene)
    except (ValueError, KeyError) as e:
        raise CLIError(str(e)) from None
    if not args.out.endswith(".pgm"):
        raise CLIError("only .pgm output is supported")
    p = Path(args.out)
    p.write_bytes(data)
    print(f"wrote {args.out}")


def cmd_synth(args):
    from planmax.io import write_dataset
    from planmax.synth import SceneTemplate, generate_scene, generate_tracks, true_rewards

    cfg = _read_config(args.config, SYNTH_KEYS)
    scenes = {}
    seed = cfg["seed"]
    for split, count, base in (("train", cfg["train_scenes"], 0), ("test", cfg["test_scenes"], 1_000_000)):
        for i in range(count):
            kind = cfg["templates"][i % len(cfg["templates"])]
            s = seed * 10_000_000 + base + i
            try:
                tmpl = SceneTemplate(kind, cfg["size"], cfg["cell_size"], cfg["road_width"])
                scene = generate_scene(tmpl, s)
            except ValueError as e:
                raise CLIError(str(e)) from None
            agents = generate_tracks(
                scene, true_rewards(scene, cfg["road_width"]), cfg["agents_per_scene"], cfg["speed_range"], s,
                N=cfg["N"], horizon=cfg["horizon"], history=cfg["history"], dt=cfg["dt"],
                accel_range=cfg["accel_range"], noise=cfg["noise"],
            )
            scenes[f"{split}_{i:04d}_{kind}"] = (scene, agents, split)
    write_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")


SYNTH_KEYS = {
    "templates": ["corridor", "t-junction", "four-way", "ring", "field"],
    "size": 15,
    "cell_size": 2.0,
    "road_width": 3,
    "train_scenes": 10,
    "test_scenes": 5,
    "agents_per_scene": 8,
    "speed_range": [2.0, 5.0],
    "accel_range": [-1.0, 1.0],
    "noise": None,
    "N": 30,
    "horizon": 12,
    "history": 9,
    "dt": 0.4,
    "seed": 0,
}


def cmd_bench(args):
    from planmax.io import save_checkpoint
    from planmax.metrics import report_csv
    from planmax.synth import BenchConfig, run_benchmark

    raw = _read_config(args.config, BenchConfig().to_dict())
    try:
        cfg = BenchConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise CLIError(str(e)) from None
    res = run_benchmark(cfg)
    _write(args.out, report_csv(res.rows))
    if args.models_dir:
        d = Path(args.models_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, model in res.models.items():
            save_checkpoint(d / f"{name}.json", model)
    print(report_csv(res.rows), end="")


# ----------------------------------------------------------------------- parser


def _case_args(p):
    p.add_argument("--data", help="dataset directory (cases.jsonl)")
    p.add_argument("--split", default="test", help="dataset split (default: test)")
    p.add_argument("--scene", help="scene file (single-case mode)")
    p.add_argument("--tracks", help="track JSONL (single-case mode)")
    p.add_argument("--track-id", type=int, default=0)
    p.add_argument("--t0", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="planmax", description="Plan-conditioned trajectory forecasting on grids.")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 for bit reproducibility)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (
        ("train-irl", cmd_train_irl, "train the reward model by MaxEnt IRL"),
        ("train-bc", cmd_train_bc, "train the behavior-cloning baseline"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="train")
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--curve", help="loss curve CSV")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.set_defaults(func=fn)

    p = sub.add_parser("train-trajgen", help="train the trajectory generator")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--config")
    p.add_argument("--reward", help="reward checkpoint (needed for stage 2)")
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_trajgen)

    p = sub.add_parser("forecast", help="write K-mode forecasts as JSON Lines")
    _case_args(p)
    p.add_argument("--variant", choices=("P2T_IRL", "P2T_CS", "P2T_BC", "CV"), default="P2T_IRL")
    p.add_argument("--reward")
    p.add_argument("--trajgen")
    p.add_argument("--bc")
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--N", type=int, default=50)
    p.add_argument("--horizon", type=int, default=12)
    p.add_argument("--dt", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attention-csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="metrics CSV for forecasts against a dataset")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("solve", help="export rewards and SVFs for one case")
    _case_args(p)
    p.add_argument("--reward", required=True)
    p.add_argument("--N", type=int, default=50)
    p.add_argument("--svf-out")
    p.add_argument("--rewards-out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("render", help="grayscale PGM heat map or forecast overlay")
    p.add_argument("artifact", choices=("svf", "rewards", "forecast"))
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--layer", choices=("path", "goal"), default="goal")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--scene", help="scene drawn under a forecast overlay")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run the synthetic ablation benchmark")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--models-dir")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            ap.error("--threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except CLIError as e:
        print(f"planmax: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"planmax: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
