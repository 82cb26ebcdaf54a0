"""Goal-state rendering and closed-loop plan verification.

The predicted goal transform is applied to the manipulated object's cloud,
merged with the scene, and splatted into an RGB image. A verifier turns
that prediction into an accept/reject verdict: the built-in geometric
verifier replays the task predicate on the hypothetical scene, while the
external client POSTs the rendered image to a configured endpoint and
fail-safe rejects on any transport problem. Rejection triggers flow
resampling, up to max_retries.
"""

from __future__ import annotations

import base64
import io
import json
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .flowdata import FlowSequence, lift_to_3d
from .geometry import CameraIntrinsics, Pose, compose
from .kinematics import JointChain
from .oracle import FlowGenerator, GeneratorRequest
from .planner import (InfeasibleTrajectory, NoFeasibleGrasp, PlanConfig,
                      Trajectory, goal_transform_from_flow, plan_trajectory,
                      rank_grasps)
from .render import EmptyRender, render_image, splat_points
from .sim import Scene, TaskSpec, check_success


class VerifyError(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    accept: bool
    reason: str = ""

    def __post_init__(self):
        if not self.accept and not self.reason:
            raise VerifyError("a rejection must carry a reason")


class PlanningFailed(Exception):
    """Every attempt was rejected; carries the full verdict list."""

    def __init__(self, verdicts: list[Verdict]):
        super().__init__(f"planning failed after {len(verdicts)} rejected attempts")
        self.verdicts = list(verdicts)


def render_goal_state(scene_cloud, scene_colors, object_cloud, object_colors,
                      goal: Pose, intrinsics: CameraIntrinsics,
                      splat_radius: int = 2) -> np.ndarray:
    """Move the object cloud by the goal transform, merge with the scene
    cloud, and z-buffer splat to an RGB image. All inputs are camera-frame;
    points ending up behind the camera are dropped."""
    scene_cloud = np.asarray(scene_cloud, dtype=np.float64).reshape(-1, 3)
    object_cloud = np.asarray(object_cloud, dtype=np.float64).reshape(-1, 3)
    if len(scene_cloud) == 0 or len(object_cloud) == 0:
        raise VerifyError("clouds must be nonempty")
    moved = goal.apply(object_cloud)
    pts = np.concatenate([scene_cloud, moved])
    cols = np.concatenate([
        np.asarray(scene_colors, dtype=np.uint8).reshape(-1, 3),
        np.asarray(object_colors, dtype=np.uint8).reshape(-1, 3)])
    return render_image(pts, cols, intrinsics, radius=splat_radius)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(image).save(path)


def image_to_png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def geometric_verify(goal: Pose, scene: Scene, task: TaskSpec) -> Verdict:
    """Judge the goal transform by evaluating the task predicate on the
    hypothetical scene where the object has been moved by it."""
    obj = scene.object(task.object)
    hypothetical = scene.with_object_pose(task.object, compose(goal, obj.pose))
    ok, diag = check_success(hypothetical, task)
    if ok:
        return Verdict(True, "all predicate clauses hold")
    bad = [f"{name} (value {entry['value']:.4f})"
           for name, entry in diag.items() if not entry["ok"]]
    return Verdict(False, "violated: " + ", ".join(bad))


VERIFY_SCHEMA = "flowact-verify-v1"


def external_verify(endpoint: str, image: np.ndarray, instruction: str,
                    timeout: float = 10.0) -> Verdict:
    """POST the rendered goal image to the endpoint; any transport or
    protocol problem rejects (fail-safe: a reject only costs a resample)."""
    body = json.dumps({
        "instruction": instruction,
        "image_png_base64": base64.b64encode(image_to_png_bytes(image)).decode("ascii"),
        "schema": VERIFY_SCHEMA,
    }).encode("utf-8")
    request = urllib.request.Request(
        endpoint, data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            if response.status != 200:
                return Verdict(False, f"transport: endpoint returned {response.status}")
            payload = json.loads(response.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, TimeoutError) as e:
        return Verdict(False, f"transport: {e}")
    except (ValueError, json.JSONDecodeError) as e:
        return Verdict(False, f"parse: {e}")
    verdict = payload.get("verdict")
    if verdict not in ("accept", "reject"):
        return Verdict(False, f"parse: missing or bad verdict field {verdict!r}")
    reason = str(payload.get("reason", "")) or "external verifier gave no reason"
    return Verdict(verdict == "accept", reason)


class GeometricVerifier:
    """Hermetic default: accepts iff the task predicate holds at the goal."""

    def __init__(self, task: TaskSpec):
        self.task = task

    def verify(self, image: np.ndarray, instruction: str, goal_world: Pose,
               scene: Scene) -> Verdict:
        return geometric_verify(goal_world, scene, self.task)


class ExternalVerifier:
    """Mirrors the paper's VLM loop over the wire protocol."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def verify(self, image: np.ndarray, instruction: str, goal_world: Pose,
               scene: Scene) -> Verdict:
        return external_verify(self.endpoint, image, instruction, self.timeout)


@dataclass(frozen=True, eq=False)
class PlanOutcome:
    trajectory: Trajectory
    goal_world: Pose
    verdicts: list
    image: np.ndarray
    flow: FlowSequence
    attempt: int


def closed_loop_plan(generator: FlowGenerator, request: GeneratorRequest,
                     task: TaskSpec, chain: JointChain, config: PlanConfig,
                     verifier, max_retries: int = 2,
                     splat_radius: int = 2) -> PlanOutcome:
    """Generate flow, render and verify the predicted goal, and plan on
    acceptance; on rejection resample with the attempt index, failing after
    max_retries rejections. Performs at most max_retries + 1 generator calls."""
    if max_retries < 0:
        raise VerifyError("max_retries must be >= 0")
    scene = request.scene
    cam_inv = scene.camera_pose.inverse()
    obj = scene.object(task.object)
    object_cam = cam_inv.apply(obj.world_points())
    rest_pts, rest_cols = [], []
    for name, other in scene.objects.items():
        if name == task.object:
            continue
        rest_pts.append(cam_inv.apply(other.world_points()))
        rest_cols.append(other.colors)
    scene_cam = np.concatenate(rest_pts)
    scene_cols = np.concatenate(rest_cols)

    verdicts: list[Verdict] = []
    for attempt in range(max_retries + 1):
        flow = generator.resample(request, attempt)
        flow3d_cam = lift_to_3d(flow)
        goal_cam = goal_transform_from_flow(flow3d_cam)
        image = render_goal_state(scene_cam, scene_cols, object_cam, obj.colors,
                                  goal_cam, scene.camera, splat_radius)
        goal_world = compose(scene.camera_pose,
                             compose(goal_cam, cam_inv))
        verdict = verifier.verify(image, request.instruction, goal_world, scene)
        verdicts.append(verdict)
        if not verdict.accept:
            continue
        flow3d_world = flow3d_cam.transformed(scene.camera_pose)
        ranked = rank_grasps(scene.world_grasps(task.object), goal_world, chain)
        if not ranked:
            raise NoFeasibleGrasp("no grasp is reachable at both ends of the goal")
        # endpoint checks cannot see intermediate poses; fall back through
        # the ranking when a trajectory proves infeasible mid-path
        last_error: Exception | None = None
        for grasp in ranked:
            try:
                trajectory = plan_trajectory(flow3d_world, grasp, chain, config)
            except InfeasibleTrajectory as e:
                last_error = e
                continue
            return PlanOutcome(trajectory=trajectory, goal_world=goal_world,
                               verdicts=verdicts, image=image, flow=flow,
                               attempt=attempt)
        raise last_error if last_error is not None else PlanningFailed(verdicts)
    raise PlanningFailed(verdicts)
