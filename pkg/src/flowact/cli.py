"""Command-line entry point.

Subcommands cover the full loop: `extract` (tracks + depth + mask -> flow
file), `gen-flow` (scripted generator -> flow file), `plan` (flow file ->
trajectory + goal render + verdict log), `eval` (trial protocol -> report),
and `render` (flow file -> goal-state PNG).

Configuration is a single JSON file (FLOWACT_CONFIG names the default)
with dotted-path --set overrides; seeds live in the config so every run is
reproducible. Artifacts land under <out_dir>/<run_id>/.

Exit codes: 0 success, 1 I/O or config error, 2 domain-empty (no moving
object / unknown task), 3 planning failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_IO = 1
EXIT_EMPTY = 2
EXIT_PLANNING = 3


DEFAULT_CONFIG = {
    "run_id": "run",
    "out_dir": "runs",
    "seed": 0,
    "task": "drawer",
    "scene": "builtin",
    "chain": "builtin",
    "oracle": {"kind": "scripted", "horizon": 32, "replay_path": None,
               "noise": {"sigma_px": 0.0, "sigma_depth": 0.0}},
    "verifier": {"kind": "geometric", "endpoint": None, "timeout_s": 10.0},
    "plan": {"global_budget": 500, "local_budget": 250, "warm_budget": 150,
             "keypoints": 96, "plan_stride": 8, "w_ik": 0.0, "w_col": 10.0,
             "max_retries": 2},
    "extraction": {"stride": 8, "threshold_frac": 0.05, "margin_px": 2,
                   "erosion_radius": 2, "instruction": ""},
    "eval": {"n_trials": 10, "randomize_xy": 0.05, "randomize_yaw_deg": 30.0,
             "corrupt_prob": 0.0},
}


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    config = DEFAULT_CONFIG
    if path is None:
        path = os.environ.get("FLOWACT_CONFIG")
    if path:
        with open(path) as f:
            config = _merge(config, json.load(f))
    for item in overrides or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    if "seed" not in config or config["seed"] is None:
        raise ValueError("config must pin an explicit seed")
    return config


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _run_dir(config: dict) -> Path:
    out = Path(config["out_dir"]) / str(config["run_id"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene(config: dict, task_name: str):
    from . import sim

    if config["scene"] in (None, "builtin"):
        return sim.make_scene(task_name, rng=None)
    return sim.read_scene(config["scene"])


def _load_chain(config: dict):
    from . import kinematics

    if config["chain"] in (None, "builtin"):
        return kinematics.desk_arm()
    return kinematics.read_chain(config["chain"])


def _plan_config(config: dict, chain, seed: int):
    from .planner import PlanConfig

    p = config["plan"]
    return PlanConfig(global_budget=p["global_budget"],
                      local_budget=p["local_budget"],
                      warm_budget=p["warm_budget"],
                      keypoints=p["keypoints"], plan_stride=p["plan_stride"],
                      w_ik=p["w_ik"], w_col=p["w_col"],
                      chain=chain, seed=seed)


def _make_generator(config: dict):
    from . import oracle

    spec = config["oracle"]
    if spec["kind"] == "replay":
        gen = oracle.ReplayGenerator(spec["replay_path"])
    elif spec["kind"] in ("scripted", "noisy"):
        gen = oracle.ScriptedGenerator(horizon=spec.get("horizon", 32))
    else:
        raise ValueError(f"unknown oracle kind {spec['kind']!r}")
    noise = spec.get("noise") or {}
    if spec["kind"] == "noisy" or noise.get("sigma_px") or noise.get("sigma_depth"):
        gen = oracle.NoisyGenerator(gen, sigma_px=noise.get("sigma_px", 0.0),
                                    sigma_depth=noise.get("sigma_depth", 0.0))
    return gen


def _make_verifier(config: dict, task):
    from . import verify

    spec = config["verifier"]
    if spec["kind"] == "external":
        if not spec.get("endpoint"):
            raise ValueError("external verifier needs an endpoint")
        return verify.ExternalVerifier(spec["endpoint"], spec.get("timeout_s", 10.0))
    return verify.GeometricVerifier(task)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_extract(args) -> int:
    from . import extraction

    config = load_config(args.config, args.set)
    try:
        tracks = extraction.read_tracks(args.tracks)
        depth_dir = Path(args.depth_dir)
        frames = sorted(depth_dir.glob("*.dmap"))
        if len(frames) != tracks.num_frames:
            print(f"error: {len(frames)} depth maps for {tracks.num_frames} frames",
                  file=sys.stderr)
            return EXIT_IO
        depth = np.stack([extraction.read_depth_map(p) for p in frames])
        mask = extraction.read_mask(args.mask)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename}", file=sys.stderr)
        return EXIT_IO
    except (extraction.ExtractionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

    ecfg = config["extraction"]
    from .flowdata import write_flow
    from .geometry import CameraIntrinsics

    intr = CameraIntrinsics(fx=config.get("fx", 150.0), fy=config.get("fy", 150.0),
                            cx=config.get("cx", tracks.width / 2),
                            cy=config.get("cy", tracks.height / 2),
                            width=tracks.width, height=tracks.height)
    try:
        flow, bbox = extraction.extract_episode(
            tracks, depth, mask, intr,
            extraction.ExtractionConfig(stride=ecfg["stride"],
                                        threshold_frac=ecfg["threshold_frac"],
                                        margin_px=ecfg["margin_px"],
                                        erosion_radius=ecfg["erosion_radius"],
                                        instruction=ecfg.get("instruction", "")))
    except extraction.NoMovingObject as e:
        print(f"no moving object: {e}", file=sys.stderr)
        return EXIT_EMPTY
    out = _run_dir(config)
    write_flow(flow, out / "flow.mflw")
    with open(out / "bbox.json", "w") as f:
        json.dump({"bbox": list(bbox), "num_points": flow.num_points,
                   "config_digest": config_digest(config)}, f, indent=1)
    print(out / "flow.mflw")
    return EXIT_OK


def cmd_gen_flow(args) -> int:
    from . import sim
    from .flowdata import write_flow
    from .oracle import GeneratorRequest, UnknownTask

    config = load_config(args.config, args.set)
    task_name = args.task or config["task"]
    seed = args.seed if args.seed is not None else config["seed"]
    try:
        task = sim.make_task(task_name)
    except sim.SimError as e:
        print(f"unknown task: {e}", file=sys.stderr)
        return EXIT_EMPTY
    try:
        scene = _load_scene(config, task_name)
        points = sim.object_initial_points(scene, task.object, seed=seed)
        generator = _make_generator(config)
        flow = generator.generate(GeneratorRequest(scene, task.instruction,
                                                   points, seed=seed))
    except UnknownTask as e:
        print(f"unknown task: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename}", file=sys.stderr)
        return EXIT_IO
    out = _run_dir(config)
    write_flow(flow, out / "flow.mflw")
    print(out / "flow.mflw")
    return EXIT_OK


def _goal_render(scene, task, goal_cam):
    from .verify import render_goal_state

    cam_inv = scene.camera_pose.inverse()
    obj = scene.object(task.object)
    rest_pts, rest_cols = [], []
    for name, other in scene.objects.items():
        if name == task.object:
            continue
        rest_pts.append(cam_inv.apply(other.world_points()))
        rest_cols.append(other.colors)
    return render_goal_state(np.concatenate(rest_pts), np.concatenate(rest_cols),
                             cam_inv.apply(obj.world_points()), obj.colors,
                             goal_cam, scene.camera)


def cmd_plan(args) -> int:
    from . import sim
    from .flowdata import read_flow
    from .oracle import GeneratorRequest, ReplayGenerator, UnknownTask, task_from_instruction
    from .planner import write_trajectory
    from .verify import PlanningFailed, closed_loop_plan, save_png

    config = load_config(args.config, args.set)
    try:
        flow = read_flow(args.flow)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: bad flow file: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        task_name = args.task or (task_from_instruction(flow.instruction)
                                  if flow.instruction else config["task"])
        task = sim.make_task(task_name)
    except (UnknownTask, sim.SimError) as e:
        print(f"unknown task: {e}", file=sys.stderr)
        return EXIT_EMPTY
    scene = _load_scene(config, task_name)
    chain = _load_chain(config)
    seed = config["seed"]
    points = sim.object_initial_points(scene, task.object, seed=seed)
    request = GeneratorRequest(scene, task.instruction, points, seed=seed)
    generator = ReplayGenerator(args.flow)
    verifier = _make_verifier(config, task)
    out = _run_dir(config)
    try:
        outcome = closed_loop_plan(generator, request, task, chain,
                                   _plan_config(config, chain, seed), verifier,
                                   max_retries=config["plan"]["max_retries"])
    except PlanningFailed as e:
        with open(out / "verdicts.json", "w") as f:
            json.dump({"verdicts": [{"accept": v.accept, "reason": v.reason}
                                    for v in e.verdicts],
                       "config_digest": config_digest(config)}, f, indent=1)
        print(f"planning failed after {len(e.verdicts)} attempts", file=sys.stderr)
        return EXIT_PLANNING
    write_trajectory(outcome.trajectory, out / "trajectory.json")
    save_png(outcome.image, out / "goal.png")
    with open(out / "verdicts.json", "w") as f:
        json.dump({"verdicts": [{"accept": v.accept, "reason": v.reason}
                                for v in outcome.verdicts],
                   "accepted_attempt": outcome.attempt,
                   "config_digest": config_digest(config)}, f, indent=1)
    print(out / "trajectory.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import sim

    config = load_config(args.config, args.set)
    task_name = args.task or config["task"]
    n = args.n if args.n is not None else config["eval"]["n_trials"]
    try:
        sim.make_task(task_name)
    except sim.SimError as e:
        print(f"unknown task: {e}", file=sys.stderr)
        return EXIT_EMPTY
    noise = config["oracle"].get("noise") or {}
    report = sim.evaluate(
        task_name, n,
        pose_randomization=(config["eval"]["randomize_xy"],
                            math.radians(config["eval"]["randomize_yaw_deg"])),
        noise=(noise.get("sigma_px", 0.0), noise.get("sigma_depth", 0.0)),
        seed=config["seed"],
        max_retries=config["plan"]["max_retries"],
        corrupt_prob=config["eval"].get("corrupt_prob", 0.0),
        horizon=config["oracle"].get("horizon", 32),
        chain=_load_chain(config))
    out = _run_dir(config)
    sim.write_report(report, out / "report.json", config_digest(config))
    print(out / "report.json")
    return EXIT_OK


def cmd_render(args) -> int:
    from . import sim
    from .flowdata import lift_to_3d, read_flow
    from .oracle import UnknownTask, task_from_instruction
    from .planner import goal_transform_from_flow
    from .verify import save_png

    config = load_config(args.config, args.set)
    try:
        flow = read_flow(args.flow)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: bad flow file: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        task_name = args.task or (task_from_instruction(flow.instruction)
                                  if flow.instruction else config["task"])
        task = sim.make_task(task_name)
    except (UnknownTask, sim.SimError) as e:
        print(f"unknown task: {e}", file=sys.stderr)
        return EXIT_EMPTY
    scene = _load_scene(config, task_name)
    goal_cam = goal_transform_from_flow(lift_to_3d(flow))
    image = _goal_render(scene, task, goal_cam)
    out = _run_dir(config)
    save_png(image, out / "goal.png")
    print(out / "goal.png")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowact",
                                     description="flow-guided manipulation planning")
    parser.add_argument("--config", help="config JSON (default: $FLOWACT_CONFIG)")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path config override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="tracks + depth + mask -> flow file")
    p.add_argument("--tracks", required=True)
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--mask", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("gen-flow", help="scripted generator -> flow file")
    p.add_argument("--task")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_flow)

    p = sub.add_parser("plan", help="flow file -> trajectory + goal render")
    p.add_argument("--flow", required=True)
    p.add_argument("--task")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("eval", help="trial protocol -> report file")
    p.add_argument("--task")
    p.add_argument("-n", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="flow file -> goal-state PNG")
    p.add_argument("--flow", required=True)
    p.add_argument("--task")
    p.set_defaults(fn=cmd_render)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
