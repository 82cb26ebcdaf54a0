"""Serial revolute-joint chains: forward kinematics, geometric Jacobian,
damped-least-squares inverse kinematics, and reachability queries."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation


class KinematicsError(ValueError):
    pass


class SizeMismatch(KinematicsError):
    pass


@dataclass(frozen=True)
class Joint:
    """Revolute joint: fixed transform from the parent link, then a rotation
    of `angle` about `axis` (unit vector in the joint frame)."""

    parent: Pose
    axis: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if abs(n - 1.0) > 1e-9:
            raise KinematicsError(f"joint axis must be unit norm, got {n}")
        if self.lo >= self.hi:
            raise KinematicsError("joint limits must satisfy lo < hi")
        object.__setattr__(self, "axis", a)
        a.setflags(write=False)


@dataclass(frozen=True)
class JointChain:
    joints: tuple[Joint, ...]
    tool: Pose = field(default_factory=Pose.identity)
    base: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if not 5 <= len(self.joints) <= 8:
            raise KinematicsError(f"supported joint count is 5..8, got {len(self.joints)}")
        object.__setattr__(self, "joints", tuple(self.joints))
        # cached homogeneous forms; FK is the package's innermost hot loop
        object.__setattr__(self, "_parent_mats",
                           np.stack([j.parent.as_matrix() for j in self.joints]))
        object.__setattr__(self, "_axes",
                           np.stack([j.axis for j in self.joints]))
        object.__setattr__(self, "_base_mat", self.base.as_matrix())
        object.__setattr__(self, "_tool_mat", self.tool.as_matrix())

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([j.lo for j in self.joints]),
                np.array([j.hi for j in self.joints]))

    def neutral(self) -> np.ndarray:
        """Midpoint of the joint limits; the default IK seed."""
        lo, hi = self.limits()
        return 0.5 * (lo + hi)

    def reach(self) -> float:
        """Upper bound on the tool distance from the base origin."""
        total = 0.0
        for j in self.joints:
            total += float(np.linalg.norm(j.parent.translation))
        return total + float(np.linalg.norm(self.tool.translation))

    def clamp(self, q) -> np.ndarray:
        lo, hi = self.limits()
        return np.clip(np.asarray(q, dtype=np.float64), lo, hi)


def _check_q(chain: JointChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if len(q) != chain.num_joints:
        raise SizeMismatch(f"expected {chain.num_joints} angles, got {len(q)}")
    return q


def _joint_rotations(chain: JointChain, q: np.ndarray) -> np.ndarray:
    """(n, 3, 3) Rodrigues rotations about each joint axis, vectorized."""
    axes = chain._axes
    n = len(q)
    kx = np.zeros((n, 3, 3))
    kx[:, 0, 1] = -axes[:, 2]
    kx[:, 0, 2] = axes[:, 1]
    kx[:, 1, 0] = axes[:, 2]
    kx[:, 1, 2] = -axes[:, 0]
    kx[:, 2, 0] = -axes[:, 1]
    kx[:, 2, 1] = axes[:, 0]
    s = np.sin(q)[:, None, None]
    c = (1.0 - np.cos(q))[:, None, None]
    return np.eye(3) + s * kx + c * (kx @ kx)


def _frame_matrices(chain: JointChain, q: np.ndarray) -> np.ndarray:
    """(n+1, 4, 4): each joint frame after its rotation, then the tool frame."""
    rots = _joint_rotations(chain, q)
    out = np.empty((chain.num_joints + 1, 4, 4))
    cur = chain._base_mat
    for i in range(chain.num_joints):
        step = chain._parent_mats[i].copy()
        step[:3, :3] = step[:3, :3] @ rots[i]
        cur = cur @ step
        out[i] = cur
    out[-1] = cur @ chain._tool_mat
    return out


def forward_kinematics(chain: JointChain, q) -> Pose:
    """World pose of the tool frame."""
    q = _check_q(chain, q)
    return Pose.from_matrix(_frame_matrices(chain, q)[-1])


def jacobian(chain: JointChain, q) -> np.ndarray:
    """Geometric Jacobian, 6 x n: linear velocity rows on top, angular below.

    Column i is (w_i x (p_tool - p_i), w_i) with w_i the world-frame joint
    axis at configuration q. Locked joints still get a column; masking is
    the caller's business.
    """
    q = _check_q(chain, q)
    frames = _frame_matrices(chain, q)
    return _jacobian_from_frames(chain, frames)


def _jacobian_from_frames(chain: JointChain, frames: np.ndarray) -> np.ndarray:
    p_tool = frames[-1, :3, 3]
    world_axes = np.einsum("nij,nj->ni", frames[:-1, :3, :3], chain._axes)
    arms = p_tool - frames[:-1, :3, 3]
    jac = np.empty((6, chain.num_joints))
    jac[:3] = np.cross(world_axes, arms).T
    jac[3:] = world_axes.T
    return jac


def _mat_rotvec(m: np.ndarray) -> np.ndarray:
    """Rotation vector of a 3x3 rotation matrix."""
    return Rotation.from_matrix(m).as_rotvec()


def _error_twist(target_mat: np.ndarray, current_mat: np.ndarray) -> np.ndarray:
    """Positional error stacked on the rotation vector of R_t R_c^T."""
    out = np.empty(6)
    out[:3] = target_mat[:3, 3] - current_mat[:3, 3]
    out[3:] = _mat_rotvec(target_mat[:3, :3] @ current_mat[:3, :3].T)
    return out


def _dls_run(chain: JointChain, target_mat: np.ndarray, q: np.ndarray,
             tol_pos: float, tol_rot: float, iters: int, damping: float,
             step_clamp: float) -> tuple[np.ndarray, np.ndarray, int]:
    """One damped-least-squares descent. Returns (q, error twist, iters used)."""
    lam = damping
    frames = _frame_matrices(chain, q)
    err = _error_twist(target_mat, frames[-1])
    err_norm = float(np.linalg.norm(err))
    eye6 = np.eye(6)
    used = 0
    while used < iters:
        if (np.linalg.norm(err[:3]) <= tol_pos
                and np.linalg.norm(err[3:]) <= tol_rot):
            return q, err, used
        used += 1
        jac = _jacobian_from_frames(chain, frames)
        jjt = jac @ jac.T
        improved = False
        for _ in range(8):
            dq = jac.T @ np.linalg.solve(jjt + (lam * lam) * eye6, err)
            peak = np.max(np.abs(dq))
            if peak > step_clamp:
                dq *= step_clamp / peak
            q_new = chain.clamp(q + dq)
            frames_new = _frame_matrices(chain, q_new)
            err_new = _error_twist(target_mat, frames_new[-1])
            if float(np.linalg.norm(err_new)) < err_norm:
                q, frames, err = q_new, frames_new, err_new
                err_norm = float(np.linalg.norm(err_new))
                lam = max(lam * 0.5, damping)
                improved = True
                break
            lam *= 2.5
        if not improved:
            break  # wedged against limits or a singularity
    return q, err, used


def _radical_inverse(base: int, k: int) -> float:
    inv, f = 0.0, 1.0 / base
    while k > 0:
        inv += f * (k % base)
        k //= base
        f /= base
    return inv


_HALTON_BASES = (2, 3, 5, 7, 11, 13, 17, 19)


# elbow postures tried at the target azimuth before Halton fallback:
# (front bent, back bent, front high-elbow, front folded)
_AZIMUTH_VARIANTS = (
    (0.0, None), (math.pi, None),
    (0.0, (1.2, 1.8, -1.0)), (0.0, (-0.5, 2.2, 1.5)),
)


def _restart_seed(chain: JointChain, k: int, target: Pose) -> np.ndarray:
    """Deterministic restart seeds: first neutral-based postures swung
    toward the target azimuth (when the base joint yaws about base z),
    then points of a Halton sequence over the joint-limit box."""
    base_joint = chain.joints[0]
    base_axis_world = chain.base.rotation.apply(base_joint.axis)
    if (k <= len(_AZIMUTH_VARIANTS)
            and abs(base_axis_world @ np.array([0.0, 0.0, 1.0])) > 0.99):
        local = chain.base.inverse().apply(target.translation)
        azimuth = math.atan2(local[1], local[0])
        yaw_offset, elbow = _AZIMUTH_VARIANTS[k - 1]
        q = chain.neutral()
        q[0] = azimuth + yaw_offset
        if elbow is not None and chain.num_joints >= 5:
            q[1], q[2], q[4] = elbow
        return chain.clamp(q)
    lo, hi = chain.limits()
    u = np.array([_radical_inverse(_HALTON_BASES[i], k)
                  for i in range(chain.num_joints)])
    return lo + u * (hi - lo)


def solve_ik(chain: JointChain, target: Pose, q0, tol_pos: float = 1e-4,
             tol_rot: float = 1e-3, max_iters: int = 400,
             damping: float = 0.05, step_clamp: float = 0.2) -> np.ndarray | None:
    """Damped least squares IK; returns joint angles or None if unreachable.

    Iterates q <- clamp(q + J^T (J J^T + lambda^2 I)^-1 e) with the
    per-joint step clamped to `step_clamp` rad and Levenberg-style adaptive
    damping. The budget is spent in slices: each descent gets a share of
    max_iters, and leftover slices restart from deterministic seeds (target
    azimuth first, then low-discrepancy points in the limit box), so hard
    targets get multiple basins while easy ones converge in the first run.
    """
    if tol_pos <= 0 or tol_rot <= 0:
        raise KinematicsError("tolerances must be positive")
    target_mat = target.as_matrix()
    q = chain.clamp(_check_q(chain, q0))
    remaining = max_iters
    slice_iters = max(max_iters // 10, 30)
    restart = 1
    while remaining > 0:
        q_out, err, used = _dls_run(chain, target_mat, q, tol_pos, tol_rot,
                                    min(slice_iters, remaining), damping,
                                    step_clamp)
        if (np.linalg.norm(err[:3]) <= tol_pos
                and np.linalg.norm(err[3:]) <= tol_rot):
            return q_out
        remaining -= max(used, 1)
        q = _restart_seed(chain, restart, target)
        restart += 1
    return None


def ik_residual(chain: JointChain, target: Pose, q0, iters: int = 20,
                damping: float = 0.05, step_clamp: float = 0.2) -> tuple[float, float]:
    """Best-effort (position, rotation) error after a short capped descent.

    No restarts: the result varies smoothly with the target, which is what
    penalty terms built on top of it need.
    """
    q = chain.clamp(_check_q(chain, q0))
    _, err, _ = _dls_run(chain, target.as_matrix(), q, 1e-9, 1e-9, iters,
                         damping, step_clamp)
    return float(np.linalg.norm(err[:3])), float(np.linalg.norm(err[3:]))


# documented seed perturbations tried by is_reachable, in order
_SEED_OFFSETS = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.4, -0.4, 0.0, 0.4, 0.0],
    [-0.5, 0.4, -0.4, 0.0, 0.4, 0.0],
    [0.0, -0.5, 0.5, 1.2, -0.4, 0.0],
    [1.5, 0.0, 0.0, -1.2, 0.6, 0.0],
])


def is_reachable(chain: JointChain, target: Pose, tol_pos: float = 1e-3,
                 tol_rot: float = 1e-2, max_iters: int = 500) -> bool:
    """Deterministic multi-seed reachability test."""
    dist = np.linalg.norm(target.translation - chain.base.translation)
    if dist > chain.reach():
        return False
    neutral = chain.neutral()
    n = chain.num_joints
    for offset in _SEED_OFFSETS:
        seed = chain.clamp(neutral + np.resize(offset, n))
        if solve_ik(chain, target, seed, tol_pos, tol_rot, max_iters) is not None:
            return True
    return False


# ---------------------------------------------------------------------------
# Chain description file (JSON)

def write_chain(chain: JointChain, path) -> None:
    doc = {
        "joints": [
            {
                "parent_translation": j.parent.translation.tolist(),
                "parent_rotation_wxyz": j.parent.rotation.q.tolist(),
                "axis": j.axis.tolist(),
                "limits": [j.lo, j.hi],
            }
            for j in chain.joints
        ],
        "tool": {"translation": chain.tool.translation.tolist(),
                 "rotation_wxyz": chain.tool.rotation.q.tolist()},
        "base": {"translation": chain.base.translation.tolist(),
                 "rotation_wxyz": chain.base.rotation.q.tolist()},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def read_chain(path) -> JointChain:
    with open(path) as f:
        doc = json.load(f)
    joints = tuple(
        Joint(
            parent=Pose(Rotation(np.array(j["parent_rotation_wxyz"])),
                        j["parent_translation"]),
            axis=np.array(j["axis"]),
            lo=float(j["limits"][0]),
            hi=float(j["limits"][1]),
        )
        for j in doc["joints"]
    )
    tool = Pose(Rotation(np.array(doc["tool"]["rotation_wxyz"])),
                doc["tool"]["translation"])
    base = Pose(Rotation(np.array(doc["base"]["rotation_wxyz"])),
                doc["base"]["translation"])
    return JointChain(joints, tool, base)


def desk_arm() -> JointChain:
    """Reference 6R tabletop arm (~1 m reach) used throughout the tests.

    Limits are asymmetric on the pitch joints so the neutral seed (limit
    midpoint) is a bent-elbow home pose instead of the singular straight-up
    stack.
    """
    def joint(tz, axis, lo, hi):
        return Joint(Pose.from_translation([0.0, 0.0, tz]),
                     np.array(axis, dtype=np.float64), lo, hi)

    return JointChain(
        joints=(
            joint(0.15, [0, 0, 1], -2.9, 2.9),
            joint(0.10, [0, 1, 0], -0.9, 1.9),
            joint(0.28, [0, 1, 0], -0.9, 2.6),
            joint(0.28, [0, 0, 1], -2.9, 2.9),
            joint(0.10, [0, 1, 0], -1.5, 2.8),
            joint(0.08, [0, 0, 1], -2.9, 2.9),
        ),
        tool=Pose.from_translation([0.0, 0.0, 0.10]),
    )
