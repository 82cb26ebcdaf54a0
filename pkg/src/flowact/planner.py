"""Flow-guided action generation.

Grasp selection by goal-transform reachability, per-timestep end-effector
pose optimization against flow keypoints, and trajectory assembly.

The per-timestep solve minimizes, over a 6-DoF pose decision variable
normalized to [-1, 1] by the workspace and rotation bounds,

    sum_i w_i ||pose * k_i - target_i||^2  +  w_ik * ik_penalty
                                           +  w_col * collision_penalty

using a seeded dual-annealing sweep for the first timestep followed by
SLSQP refinement; warm-started timesteps run SLSQP only. Because a grasped
rigid object and the gripper share one trajectory, the keypoints are
expressed in the gripper frame and the decision variable IS the
end-effector pose (its workspace/rotation bounds are then meaningful);
composing the solved object transform with the grasp pose is folded into
that parameterization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import dual_annealing, minimize

from .flowdata import Flow3D, frame_points
from .geometry import (
    DegenerateInput,
    Pose,
    Rotation,
    compose,
    estimate_rigid_transform,
    euler_to_rotation,
    farthest_point_sample,
    rotation_to_euler,
    wrap_angle,
)
from .kinematics import JointChain, ik_residual, is_reachable


class PlannerError(ValueError):
    pass


class SizeMismatch(PlannerError):
    pass


class NoFeasibleGrasp(PlannerError):
    pass


class InfeasibleTrajectory(PlannerError):
    pass


class BudgetExhausted(PlannerError):
    """The local phase hit its evaluation cap before converging; carries
    the best pose and cost seen so far so the caller can decide."""

    def __init__(self, pose: Pose, cost: float):
        super().__init__(f"evaluation budget exhausted at cost {cost:.6g}")
        self.pose = pose
        self.cost = cost


@dataclass(frozen=True)
class GraspCandidate:
    pose: Pose
    width: float
    score: float = 0.5

    def __post_init__(self):
        if self.width <= 0:
            raise PlannerError("grasp opening width must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise PlannerError("grasp score must lie in [0, 1]")


OPEN, CLOSE, HOLD = "open", "close", "hold"
_GRIPPER_COMMANDS = (OPEN, CLOSE, HOLD)


@dataclass(frozen=True)
class TrajectoryStep:
    time: float
    pose: Pose
    gripper: str

    def __post_init__(self):
        if self.gripper not in _GRIPPER_COMMANDS:
            raise PlannerError(f"unknown gripper command {self.gripper!r}")


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]

    def __post_init__(self):
        times = [s.time for s in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise PlannerError("step timestamps must be strictly increasing")
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self):
        return len(self.steps)

    def final_pose(self) -> Pose:
        return self.steps[-1].pose


@dataclass
class PlanConfig:
    """Workspace box and rotation restriction define the decode of the
    normalized decision variable; budgets count objective evaluations.

    The default rotation restriction keeps the tool approach axis (+z of
    the decoded pose) pointing at or below the horizon: roll is confined
    to pi +- pi/2 and pitch to +-pi/2, so cos(pitch) * cos(roll) <= 0.
    """

    workspace_lo: np.ndarray = field(default_factory=lambda: np.array([0.10, -0.45, 0.0]))
    workspace_hi: np.ndarray = field(default_factory=lambda: np.array([0.75, 0.45, 0.60]))
    rot_center: np.ndarray = field(default_factory=lambda: np.array([math.pi, 0.0, 0.0]))
    rot_half_range: np.ndarray = field(default_factory=lambda: np.array([math.pi / 2, math.pi / 2, math.pi]))
    keypoints: int = 16
    global_budget: int = 2000
    local_budget: int = 500
    warm_budget: int = 300
    collision_spheres: tuple[tuple[tuple[float, float, float], float], ...] = ()
    w_ik: float = 10.0
    w_col: float = 10.0
    chain: JointChain | None = None
    ik_penalty_iters: int = 20
    # residuals below the deadband cost nothing: the penalty is a barrier
    # against unreachable poses, not a tracking term
    ik_deadband_pos: float = 0.005
    ik_deadband_rot: float = 0.05
    plan_stride: int = 4
    max_rms_residual: float = 0.06
    end_gripper: str = OPEN
    seed: int = 0

    def __post_init__(self):
        self.workspace_lo = np.asarray(self.workspace_lo, dtype=np.float64)
        self.workspace_hi = np.asarray(self.workspace_hi, dtype=np.float64)
        self.rot_center = np.asarray(self.rot_center, dtype=np.float64)
        self.rot_half_range = np.asarray(self.rot_half_range, dtype=np.float64)
        if np.any(self.workspace_hi <= self.workspace_lo):
            raise PlannerError("workspace box must be nonempty")
        if self.keypoints < 3:
            raise PlannerError("need at least 3 keypoints")
        if min(self.global_budget, self.local_budget, self.warm_budget) <= 0:
            raise PlannerError("budgets must be positive")

    @staticmethod
    def unconstrained(**overrides) -> "PlanConfig":
        """Full SO(3) range, generous box, no penalties; oracle-equivalence
        tests run against this."""
        defaults = dict(
            workspace_lo=np.array([-1.5, -1.5, -1.5]),
            workspace_hi=np.array([1.5, 1.5, 1.5]),
            rot_center=np.zeros(3),
            rot_half_range=np.array([math.pi, math.pi / 2, math.pi]),
            w_ik=0.0,
            w_col=0.0,
        )
        defaults.update(overrides)
        return PlanConfig(**defaults)

    def decode(self, x: np.ndarray) -> Pose:
        t_center = 0.5 * (self.workspace_lo + self.workspace_hi)
        t_half = 0.5 * (self.workspace_hi - self.workspace_lo)
        t = t_center + np.clip(x[:3], -1.0, 1.0) * t_half
        e = self.rot_center + np.clip(x[3:], -1.0, 1.0) * self.rot_half_range
        return Pose(euler_to_rotation(*(wrap_angle(a) for a in e)), t)

    def encode(self, pose: Pose) -> np.ndarray:
        t_center = 0.5 * (self.workspace_lo + self.workspace_hi)
        t_half = 0.5 * (self.workspace_hi - self.workspace_lo)
        xt = np.clip((pose.translation - t_center) / t_half, -1.0, 1.0)
        e = np.array(rotation_to_euler(pose.rotation))
        d = np.array([wrap_angle(a - c) for a, c in zip(e, self.rot_center)])
        xr = np.clip(d / self.rot_half_range, -1.0, 1.0)
        return np.concatenate([xt, xr])


def goal_transform_from_flow(flow3d: Flow3D) -> Pose:
    """Rigid transform from the first to the last frame over the points
    visible in both."""
    vis = flow3d.visibility.astype(bool)
    joint = vis[0] & vis[-1]
    if joint.sum() < 3:
        raise DegenerateInput(
            f"only {int(joint.sum())} points visible in both end frames")
    return estimate_rigid_transform(flow3d.points[0][joint],
                                    flow3d.points[-1][joint])


def rank_grasps(candidates: list[GraspCandidate], goal: Pose,
                chain: JointChain) -> list[GraspCandidate]:
    """Candidates reachable both as-is and after the goal transform, best
    score first (ties: lowest index)."""
    ranked = []
    for i, cand in enumerate(candidates):
        if not is_reachable(chain, cand.pose):
            continue
        if not is_reachable(chain, compose(goal, cand.pose)):
            continue
        ranked.append(((-cand.score, i), cand))
    ranked.sort(key=lambda pair: pair[0])
    return [cand for _, cand in ranked]


def select_grasp(candidates: list[GraspCandidate], goal: Pose,
                 chain: JointChain) -> GraspCandidate:
    """Among candidates reachable both as-is and after the goal transform,
    return the highest-scored one (ties: lowest index)."""
    if not candidates:
        raise NoFeasibleGrasp("no grasp candidates supplied")
    ranked = rank_grasps(candidates, goal, chain)
    if not ranked:
        raise NoFeasibleGrasp(
            f"none of {len(candidates)} candidates is reachable at both ends")
    return ranked[0]


def flow_cost(pose: Pose, k_initial, k_target, weights=None) -> float:
    """Weighted sum of squared distances between moved initial keypoints
    and their targets."""
    k_initial = np.asarray(k_initial, dtype=np.float64).reshape(-1, 3)
    k_target = np.asarray(k_target, dtype=np.float64).reshape(-1, 3)
    if k_initial.shape != k_target.shape:
        raise SizeMismatch(f"{k_initial.shape} vs {k_target.shape}")
    d2 = np.sum((pose.apply(k_initial) - k_target) ** 2, axis=1)
    if weights is None:
        return float(d2.sum())
    w = np.asarray(weights, dtype=np.float64).reshape(len(d2))
    return float((w * d2).sum())


def collision_penalty(points, spheres) -> float:
    """Sum of squared sphere penetrations over all point/sphere pairs."""
    if not spheres:
        return 0.0
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    total = 0.0
    for center, radius in spheres:
        dist = np.linalg.norm(pts - np.asarray(center, dtype=np.float64), axis=1)
        pen = np.maximum(0.0, radius - dist)
        total += float((pen * pen).sum())
    return total


class _BudgetStop(Exception):
    pass


class _Objective:
    """Counting wrapper that tracks the best sample and enforces the cap."""

    def __init__(self, fn, cap: int, keep_history: bool = False):
        self.fn = fn
        self.cap = cap
        self.evals = 0
        self.best_x = None
        self.best_cost = np.inf
        self.history: list[tuple[float, np.ndarray]] | None = \
            [] if keep_history else None

    def __call__(self, x):
        if self.evals >= self.cap:
            raise _BudgetStop
        self.evals += 1
        c = self.fn(x)
        if c < self.best_cost:
            self.best_cost = c
            self.best_x = np.array(x)
        if self.history is not None:
            self.history.append((c, np.array(x)))
        return c

    def diverse_starts(self, count: int, min_dist: float = 0.6) -> list[np.ndarray]:
        """Best samples pairwise at least min_dist apart in the normalized
        box; cheap insurance against polishing into a single bad basin."""
        if not self.history:
            return [self.best_x] if self.best_x is not None else []
        ordered = sorted(self.history, key=lambda pair: pair[0])
        starts: list[np.ndarray] = []
        for _, x in ordered:
            if len(starts) >= count:
                break
            if all(np.linalg.norm(x - s) >= min_dist for s in starts):
                starts.append(x)
        return starts


def solve_pose_at_t(k_initial, k_target, current: Pose, config: PlanConfig,
                    warm: Pose | None = None, weights=None,
                    ik_seed=None, stats: dict | None = None) -> Pose:
    """Minimize the flow-keypoint objective over the normalized pose box.

    Without a warm start: seeded dual-annealing sweep over the box from the
    current pose, then SLSQP from the best samples found. With a warm
    start: SLSQP only, from the warm pose. The IK penalty's inner solve is
    seeded from ik_seed (the trajectory's current joint state) so a short
    iteration cap still yields a faithful residual. Raises BudgetExhausted
    (with the best pose and cost attached) when the local phase is cut off
    by the evaluation cap before converging.
    """
    k_initial = np.asarray(k_initial, dtype=np.float64).reshape(-1, 3)
    k_target = np.asarray(k_target, dtype=np.float64).reshape(-1, 3)
    spheres = tuple(config.collision_spheres)
    use_ik = config.w_ik > 0 and config.chain is not None
    if use_ik:
        q_seed = config.chain.neutral() if ik_seed is None else np.asarray(ik_seed)

    def cost(x):
        pose = config.decode(x)
        c = flow_cost(pose, k_initial, k_target, weights)
        if use_ik:
            pos_err, rot_err = ik_residual(config.chain, pose, q_seed,
                                           iters=config.ik_penalty_iters)
            p = max(0.0, pos_err - config.ik_deadband_pos)
            r = max(0.0, rot_err - config.ik_deadband_rot)
            c += config.w_ik * (p * p + r * r)
        if spheres and config.w_col > 0:
            c += config.w_col * collision_penalty(pose.apply(k_initial), spheres)
        return c

    bounds = [(-1.0, 1.0)] * 6
    local_starts: list[np.ndarray] = []
    if warm is None:
        objective = _Objective(cost, config.global_budget, keep_history=True)
        x0 = config.encode(current)
        try:
            dual_annealing(objective, bounds=bounds, maxfun=config.global_budget,
                           rng=config.seed, no_local_search=True, x0=x0)
        except _BudgetStop:
            pass
        # polish from diverse top annealing samples and from the start pose
        local_starts = objective.diverse_starts(4) + [x0]
        global_evals = objective.evals
        local_cap = config.local_budget
    else:
        objective = _Objective(cost, 0)
        local_starts = [config.encode(warm)]
        global_evals = 0
        local_cap = config.warm_budget

    local = _Objective(cost, local_cap)
    if objective.best_x is not None:
        local.best_x, local.best_cost = objective.best_x, objective.best_cost
    completed_any = False
    for start in local_starts:
        if start is None:
            continue
        try:
            minimize(local, start, method="SLSQP", bounds=bounds,
                     options={"maxiter": 150, "ftol": 1e-12})
            completed_any = True
        except _BudgetStop:
            break
    if local.best_x is None:
        raise PlannerError("optimizer produced no evaluation")
    best_pose = config.decode(local.best_x)
    if stats is not None:
        stats["evals"] = global_evals + local.evals
        stats["cost"] = local.best_cost
    if not completed_any:
        raise BudgetExhausted(best_pose, local.best_cost)
    return best_pose


def plan_trajectory(flow3d: Flow3D, grasp: GraspCandidate, chain: JointChain,
                    config: PlanConfig) -> Trajectory:
    """Assemble the full pick-and-place trajectory along the flow.

    flow3d must be expressed in the same frame as the grasp pose and the
    chain (the world frame); keypoints are chosen on the first frame by
    farthest point sampling and tracked by index. Planning solves every
    `plan_stride`-th frame plus the last one, warm-starting each solve from
    the previous; a BudgetExhausted local solve contributes its best pose.
    """
    first = frame_points(flow3d, 0)
    vis0 = np.flatnonzero(first.weights > 0)
    if len(vis0) < 3:
        raise DegenerateInput("fewer than 3 visible points in the first frame")
    n_key = min(config.keypoints, len(vis0))
    picked = farthest_point_sample(first.points[vis0], n_key, start_index=0)
    sel = vis0[picked]
    k_world = flow3d.points[0][sel]
    k_grip = grasp.pose.inverse().apply(k_world)

    from .kinematics import solve_ik

    t_count = flow3d.num_timesteps
    schedule = sorted(set(range(config.plan_stride, t_count,
                                config.plan_stride)) | {t_count - 1})
    steps = [TrajectoryStep(0.0, grasp.pose, OPEN),
             TrajectoryStep(0.5, grasp.pose, CLOSE)]
    if not is_reachable(chain, grasp.pose):
        raise InfeasibleTrajectory("grasp pose fails the reachability check")
    q_track = solve_ik(chain, grasp.pose, chain.neutral(),
                       tol_pos=1e-3, tol_rot=1e-2)
    prev = grasp.pose
    warm: Pose | None = None
    time = 1.0
    for t in schedule:
        k_t = flow3d.points[t][sel]
        w_t = flow3d.visibility[t][sel].astype(np.float64)
        if w_t.sum() < 3:
            continue  # too few visible targets to constrain a pose
        try:
            pose_t = solve_pose_at_t(k_grip, k_t, current=prev, config=config,
                                     warm=warm, weights=w_t, ik_seed=q_track)
        except BudgetExhausted as e:
            pose_t = e.pose
        rms = math.sqrt(flow_cost(pose_t, k_grip, k_t, w_t) / w_t.sum())
        if rms > config.max_rms_residual:
            raise InfeasibleTrajectory(
                f"flow frame {t} unreachable within bounds (rms {rms:.3f} m)")
        # hard reachability check: continue the arm branch when possible,
        # fall back to the multi-seed test before rejecting
        q_next = None
        if q_track is not None:
            q_next = solve_ik(chain, pose_t, q_track,
                              tol_pos=1e-3, tol_rot=1e-2, max_iters=150)
        if q_next is not None:
            q_track = q_next
        elif not is_reachable(chain, pose_t):
            raise InfeasibleTrajectory(
                f"pose at flow frame {t} fails the reachability check")
        steps.append(TrajectoryStep(time, pose_t, CLOSE))
        prev = pose_t
        warm = pose_t
        time += 1.0
    if len(steps) == 2:
        raise InfeasibleTrajectory("no flow frame had enough visible points")
    steps.append(TrajectoryStep(time, prev, config.end_gripper))
    return Trajectory(tuple(steps))


# ---------------------------------------------------------------------------
# Trajectory file (JSON)

def write_trajectory(traj: Trajectory, path) -> None:
    doc = {
        "steps": [
            {"time": s.time,
             "translation": s.pose.translation.tolist(),
             "rotation_wxyz": s.pose.rotation.q.tolist(),
             "gripper": s.gripper}
            for s in traj.steps
        ]
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def read_trajectory(path) -> Trajectory:
    with open(path) as f:
        doc = json.load(f)
    steps = tuple(
        TrajectoryStep(float(s["time"]),
                       Pose(Rotation(np.array(s["rotation_wxyz"])), s["translation"]),
                       s["gripper"])
        for s in doc["steps"]
    )
    return Trajectory(steps)
