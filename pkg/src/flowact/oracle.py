"""Flow generator surrogates.

The learned flow world model is out of scope; what remains is its I/O
contract: given a scene snapshot, an instruction, initial pixel points and
a seed, produce a flow sequence. Three implementations are provided:

  * ScriptedGenerator - interpolates the task's motion script (data files
    bound to scene anchors) with constant-twist screw segments and moves
    the initial points rigidly along it;
  * ReplayGenerator   - returns a stored MFLW file;
  * NoisyGenerator    - wraps another generator and perturbs its output.

A CorruptingGenerator supports the closed-loop ablation by displacing the
goal on chosen attempts.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from importlib import resources
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .flowdata import FlowSequence, inject_noise, lift_to_3d
from .geometry import Pose, Rotation, compose, project_points, screw_interpolate
from .render import splat_points

if TYPE_CHECKING:
    from .sim import Scene, TaskSpec


class OracleError(ValueError):
    pass


class UnknownTask(OracleError):
    pass


@dataclass(frozen=True)
class GeneratorRequest:
    scene: "Scene"
    instruction: str
    initial_points: np.ndarray  # (N, 2) pixel coordinates at t = 0
    seed: int = 0

    def __post_init__(self):
        pts = np.asarray(self.initial_points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            raise OracleError("initial_points must be nonempty")
        object.__setattr__(self, "initial_points", pts)


class FlowGenerator(Protocol):
    def generate(self, request: GeneratorRequest) -> FlowSequence: ...

    def resample(self, request: GeneratorRequest, attempt: int) -> FlowSequence: ...


class _ResampleBySeed:
    """resample(request, k) = generate with the seed offset by k."""

    def resample(self, request: GeneratorRequest, attempt: int) -> FlowSequence:
        if attempt < 0:
            raise OracleError("attempt must be >= 0")
        if attempt == 0:
            return self.generate(request)
        return self.generate(replace(request, seed=request.seed + attempt))


@dataclass(frozen=True)
class MotionScript:
    """Resolved object waypoints in world coordinates, screw-interpolated."""

    waypoints: tuple[tuple[float, Pose], ...]

    def __post_init__(self):
        times = [t for t, _ in self.waypoints]
        if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
            raise OracleError("need >= 2 waypoints with strictly increasing times")

    @property
    def duration(self) -> float:
        return self.waypoints[-1][0]

    def pose_at(self, time: float) -> Pose:
        times = [t for t, _ in self.waypoints]
        if time <= times[0]:
            return self.waypoints[0][1]
        if time >= times[-1]:
            return self.waypoints[-1][1]
        hi = next(i for i, t in enumerate(times) if t >= time)
        t0, p0 = self.waypoints[hi - 1]
        t1, p1 = self.waypoints[hi]
        return screw_interpolate(p0, p1, (time - t0) / (t1 - t0))


def write_motion_script(script: MotionScript, path) -> None:
    doc = {"waypoints": [
        {"time": t,
         "translation": p.translation.tolist(),
         "rotation_wxyz": p.rotation.q.tolist()}
        for t, p in script.waypoints]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def read_motion_script(path) -> MotionScript:
    with open(path) as f:
        doc = json.load(f)
    return MotionScript(tuple(
        (float(w["time"]),
         Pose(Rotation(np.array(w["rotation_wxyz"])), w["translation"]))
        for w in doc["waypoints"]))


# ---------------------------------------------------------------------------
# Script templates: waypoint operations bound to scene anchors

def load_script_template(task_name: str, script_dir=None) -> dict:
    if script_dir is not None:
        path = f"{script_dir}/{task_name}.json"
        with open(path) as f:
            return json.load(f)
    ref = resources.files("flowact") / "scripts" / f"{task_name}.json"
    if not ref.is_file():
        raise UnknownTask(f"no script shipped for task {task_name!r}")
    return json.loads(ref.read_text())


def _resolve_point(ref: str, scene: "Scene", task: "TaskSpec",
                   current: Pose) -> np.ndarray:
    """'self/anchor' or '<role>/anchor' to a world point; self anchors move
    with the chained pose, others use their object's scene pose."""
    owner, _, name = ref.partition("/")
    if owner == "self":
        obj = scene.objects[task.object]
        return current.apply(obj.anchors[name])
    obj = scene.objects[task.bindings[owner]]
    return obj.pose.apply(obj.anchors[name])


def _resolve_direction(ref, scene: "Scene", task: "TaskSpec",
                       current: Pose) -> np.ndarray:
    if not isinstance(ref, str):
        d = np.asarray(ref, dtype=np.float64).reshape(3)
        return d / np.linalg.norm(d)
    owner, _, name = ref.partition("/")
    if owner == "self":
        obj = scene.objects[task.object]
        return current.rotation.apply(obj.directions[name])
    obj = scene.objects[task.bindings[owner]]
    return obj.pose.rotation.apply(obj.directions[name])


def resolve_script(template: dict, scene: "Scene", task: "TaskSpec") -> MotionScript:
    """Apply the template's waypoint operations against the scene anchors,
    chaining from the object's initial pose."""
    pose = scene.objects[task.object].pose
    waypoints = []
    for wp in template["waypoints"]:
        if "translate" in wp:
            delta = np.asarray(wp["translate"], dtype=np.float64)
            pose = Pose(pose.rotation, pose.translation + delta)
        if "translate_along" in wp:
            spec = wp["translate_along"]
            d = _resolve_direction(spec["dir"], scene, task, pose)
            pose = Pose(pose.rotation, pose.translation + spec["distance"] * d)
        if "orient" in wp:
            spec = wp["orient"]
            d_now = _resolve_direction("self/" + spec["object_dir"], scene, task, pose)
            d_want = _resolve_direction(spec["world_dir"], scene, task, pose)
            rot = _minimal_rotation(d_now, d_want)
            if spec.get("roll_deg"):  # extra roll about the aligned axis
                rot = Rotation.from_axis_angle(
                    d_want, math.radians(spec["roll_deg"])).compose(rot)
            pose = Pose(rot.compose(pose.rotation), pose.translation)
        if "move_anchor" in wp:
            spec = wp["move_anchor"]
            here = _resolve_point("self/" + spec["anchor"], scene, task, pose)
            there = _resolve_point(spec["to"], scene, task, pose)
            offset = np.asarray(spec.get("offset", (0.0, 0.0, 0.0)), dtype=np.float64)
            pose = Pose(pose.rotation, pose.translation + (there + offset - here))
        if "rotate" in wp:
            spec = wp["rotate"]
            axis = _resolve_direction(spec["axis"], scene, task, pose)
            pivot = _resolve_point(spec["pivot"], scene, task, pose)
            rot = Rotation.from_axis_angle(axis, math.radians(spec["angle_deg"]))
            delta = compose(Pose.from_translation(pivot),
                            compose(Pose(rot), Pose.from_translation(-pivot)))
            pose = compose(delta, pose)
        waypoints.append((float(wp["time"]), pose))
    return MotionScript(tuple(waypoints))


def _minimal_rotation(d_from: np.ndarray, d_to: np.ndarray) -> Rotation:
    axis = np.cross(d_from, d_to)
    dot = float(np.clip(d_from @ d_to, -1.0, 1.0))
    n = np.linalg.norm(axis)
    if n < 1e-12:
        if dot > 0:
            return Rotation.identity()
        # antiparallel: rotate pi about any perpendicular
        perp = np.cross(d_from, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(d_from, [0.0, 1.0, 0.0])
        return Rotation.from_axis_angle(perp, math.pi)
    return Rotation.from_axis_angle(axis, math.atan2(n, dot))


# ---------------------------------------------------------------------------
# Generators

_TASK_KEYWORDS = {
    "pour": "pour",
    "tea": "pour",
    "insert": "insert",
    "pen": "insert",
    "hang": "hang",
    "mug rack": "hang",
    "drawer": "drawer",
}


def task_from_instruction(instruction: str) -> str:
    text = instruction.lower()
    for keyword, task in _TASK_KEYWORDS.items():
        if re.search(r"\b" + re.escape(keyword) + r"\b", text):
            return task
    raise UnknownTask(f"instruction {instruction!r} matches no known task")


@dataclass(frozen=True)
class ScriptedGenerator(_ResampleBySeed):
    """Moves the initial points rigidly along the task's motion script and
    projects them back through the scene camera."""

    horizon: int = 32
    script_dir: str | None = None

    def generate(self, request: GeneratorRequest) -> FlowSequence:
        from .sim import make_task  # deferred: sim imports this module too

        scene = request.scene
        task_name = task_from_instruction(request.instruction)
        task = make_task(task_name)
        template = load_script_template(task_name, self.script_dir)
        script = resolve_script(template, scene, task)

        k = scene.camera
        cam_inv = scene.camera_pose.inverse()
        pts_cam = cam_inv.apply(scene.visible_points_world())
        # radius-1 splat fills sampling holes; the <=1 px lateral slack in
        # the lift is irrelevant because the points move rigidly afterwards
        buf = splat_points(pts_cam, k, radius=1)

        uv0 = request.initial_points
        px = np.clip(np.rint(uv0[:, 0]).astype(int), 0, k.width - 1)
        py = np.clip(np.rint(uv0[:, 1]).astype(int), 0, k.height - 1)
        depth0 = buf.depth[py, px]
        alive = depth0 > 0
        x_cam = np.zeros((len(uv0), 3))
        x_cam[alive] = np.stack([
            (uv0[alive, 0] - k.cx) * depth0[alive] / k.fx,
            (uv0[alive, 1] - k.cy) * depth0[alive] / k.fy,
            depth0[alive]], axis=1)
        x_world = scene.camera_pose.apply(x_cam)

        t_count = self.horizon
        p0 = script.pose_at(0.0)
        times = np.linspace(0.0, script.duration, t_count)
        uv = np.zeros((t_count, len(uv0), 2))
        depth = np.zeros((t_count, len(uv0)))
        vis = np.zeros((t_count, len(uv0)), dtype=np.uint8)
        for t, time in enumerate(times):
            delta = compose(script.pose_at(float(time)), p0.inverse())
            moved_cam = cam_inv.apply(delta.apply(x_world))
            uv_t, z_t = project_points(k, moved_cam)
            ok = alive & (z_t > 0)
            ok &= np.where(ok, (uv_t[:, 0] >= 0) & (uv_t[:, 0] < k.width)
                           & (uv_t[:, 1] >= 0) & (uv_t[:, 1] < k.height), False)
            uv[t][ok] = uv_t[ok]
            depth[t][ok] = z_t[ok]
            vis[t] = ok
        return FlowSequence(uv, depth, vis, k, request.instruction).validate()


@dataclass(frozen=True)
class ReplayGenerator(_ResampleBySeed):
    """Returns a stored flow file; the seed has nothing to vary."""

    path: str

    def generate(self, request: GeneratorRequest) -> FlowSequence:
        from .flowdata import read_flow

        return read_flow(self.path)


@dataclass(frozen=True)
class NoisyGenerator(_ResampleBySeed):
    inner: FlowGenerator
    sigma_px: float = 1.0
    sigma_depth: float = 0.005

    def generate(self, request: GeneratorRequest) -> FlowSequence:
        clean = self.inner.generate(request)
        return inject_noise(clean, self.sigma_px, self.sigma_depth, seed=request.seed)


@dataclass(frozen=True)
class CorruptingGenerator(_ResampleBySeed):
    """Displaces the second half of the flow by a world offset on the given
    attempts; models a wrong goal prediction for closed-loop ablations."""

    inner: FlowGenerator
    bad_attempts: frozenset = frozenset((0,))
    offset_world: tuple[float, float, float] = (0.10, 0.0, 0.0)

    def generate(self, request: GeneratorRequest) -> FlowSequence:
        return self._emit(request, attempt=0)

    def resample(self, request: GeneratorRequest, attempt: int) -> FlowSequence:
        if attempt < 0:
            raise OracleError("attempt must be >= 0")
        req = request if attempt == 0 else replace(request, seed=request.seed + attempt)
        return self._emit(req, attempt)

    def _emit(self, request: GeneratorRequest, attempt: int) -> FlowSequence:
        flow = self.inner.generate(request)
        if attempt not in self.bad_attempts:
            return flow
        k = flow.intrinsics
        d_cam = request.scene.camera_pose.rotation.inverse().apply(
            np.asarray(self.offset_world, dtype=np.float64))
        f3 = lift_to_3d(flow)
        t_count = flow.num_timesteps
        uv = flow.uv.copy()
        depth = flow.depth.copy()
        vis = flow.visibility.copy()
        for t in range(t_count // 2, t_count):
            moved = f3.points[t] + d_cam
            uv_t, z_t = project_points(k, moved)
            ok = (vis[t] > 0) & (z_t > 0)
            ok &= np.where(ok, (uv_t[:, 0] >= 0) & (uv_t[:, 0] < k.width)
                           & (uv_t[:, 1] >= 0) & (uv_t[:, 1] < k.height), False)
            uv[t][ok] = uv_t[ok]
            depth[t][ok] = z_t[ok]
            vis[t] = ok
        return FlowSequence(uv, depth, vis, k, flow.instruction).validate()
