"""Rigid-body geometry: rotations, SE(3) poses, point-set registration,
farthest point sampling, and pinhole camera projection.

Conventions used throughout the package:
  * quaternions are (w, x, y, z), unit norm, canonicalized so w >= 0
  * Euler angles are extrinsic X-Y-Z (roll, pitch, yaw about fixed world
    axes), i.e. R = Rz(rz) @ Ry(ry) @ Rx(rx)
  * camera frame is the usual CV one: z forward, x right, y down
  * all arrays are float64; all functions are pure
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for geometric precondition violations."""


class DegenerateInput(GeometryError):
    """Point set too small or rank-deficient for the requested operation."""


class MismatchedSizes(GeometryError):
    """Corresponding point sets differ in length."""


class InvalidCount(GeometryError):
    """Requested sample count outside the valid range."""


class BehindCamera(GeometryError):
    """Point has non-positive depth in the camera frame."""


class NonPositiveDepth(GeometryError):
    """Depth value must be strictly positive."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite vector: {a}")
    return a


def _as_points(points) -> np.ndarray:
    a = np.asarray(points, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) points, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion (w, x, y, z) with w >= 0."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise GeometryError("zero-norm quaternion")
        q = q / n
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "q", q)
        self.q.setflags(write=False)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        axis = _as_vec3(axis)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise GeometryError("zero-norm rotation axis")
        half = 0.5 * angle
        return Rotation(np.concatenate([[math.cos(half)],
                                        math.sin(half) / n * axis]))

    @staticmethod
    def from_rotvec(v) -> "Rotation":
        v = _as_vec3(v)
        angle = np.linalg.norm(v)
        if angle < 1e-12:
            # second-order small-angle expansion keeps round trips exact
            return Rotation(np.concatenate([[1.0 - angle * angle / 8.0], 0.5 * v]))
        return Rotation.from_axis_angle(v, angle)

    @staticmethod
    def from_matrix(m) -> "Rotation":
        """Shepperd's method: pick the numerically largest pivot."""
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0:
            s = 0.5 / math.sqrt(t + 1.0)
            q = np.array([0.25 / s,
                          (m[2, 1] - m[1, 2]) * s,
                          (m[0, 2] - m[2, 0]) * s,
                          (m[1, 0] - m[0, 1]) * s])
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = np.array([(m[2, 1] - m[1, 2]) / s,
                          0.25 * s,
                          (m[0, 1] + m[1, 0]) / s,
                          (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = np.array([(m[0, 2] - m[2, 0]) / s,
                          (m[0, 1] + m[1, 0]) / s,
                          0.25 * s,
                          (m[1, 2] + m[2, 1]) / s])
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = np.array([(m[1, 0] - m[0, 1]) / s,
                          (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s,
                          0.25 * s])
        return Rotation(q)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def as_rotvec(self) -> np.ndarray:
        w = min(1.0, max(-1.0, float(self.q[0])))
        v = self.q[1:]
        s = np.linalg.norm(v)
        if s < 1e-12:
            return 2.0 * v  # first-order: angle ~ 2*s
        angle = 2.0 * math.atan2(s, w)
        return (angle / s) * v

    @property
    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        w = min(1.0, max(-1.0, float(self.q[0])))
        return 2.0 * math.acos(w)

    def compose(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def inverse(self) -> "Rotation":
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.as_matrix().T

    def angle_to(self, other: "Rotation") -> float:
        return self.inverse().compose(other).angle

    def __repr__(self):
        return f"Rotation(wxyz={np.array2string(self.q, precision=6)})"


def slerp(a: Rotation, b: Rotation, s: float) -> Rotation:
    """Shortest-arc spherical interpolation, s in [0, 1]."""
    qa, qb = a.q, b.q
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb, dot = -qb, -dot
    if dot > 1.0 - 1e-12:
        return Rotation(qa + s * (qb - qa))
    theta = math.acos(min(1.0, dot))
    return Rotation((math.sin((1 - s) * theta) * qa + math.sin(s * theta) * qb)
                    / math.sin(theta))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: x -> rotation * x + translation."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        self.translation.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(Rotation.identity(), t)

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return Pose(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        return self.rotation.apply(points) + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation.compose(other.rotation),
                    self.rotation.apply(other.translation) + self.translation)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def __repr__(self):
        return (f"Pose(t={np.array2string(self.translation, precision=4)}, "
                f"q={np.array2string(self.rotation.q, precision=4)})")


def compose(a: Pose, b: Pose) -> Pose:
    """Composition applying b first, then a."""
    return a.compose(b)


def invert(p: Pose) -> Pose:
    return p.inverse()


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance, rotation angle) between two poses."""
    return (float(np.linalg.norm(a.translation - b.translation)),
            a.rotation.angle_to(b.rotation))


# ---------------------------------------------------------------------------
# SE(3) exponential coordinates and screw interpolation

def se3_log(p: Pose) -> np.ndarray:
    """Twist (rho, theta) in R^6 with p = se3_exp of it."""
    theta = p.rotation.as_rotvec()
    angle = np.linalg.norm(theta)
    if angle < 1e-10:
        return np.concatenate([p.translation, theta])
    k = theta / angle
    kx = _skew(k)
    # V^-1 from the closed form of the left Jacobian inverse
    half = 0.5 * angle
    cot = half / math.tan(half)
    v_inv = np.eye(3) - 0.5 * _skew(theta) + (1.0 - cot) * (kx @ kx)
    return np.concatenate([v_inv @ p.translation, theta])


def se3_exp(twist) -> Pose:
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, theta = twist[:3], twist[3:]
    angle = np.linalg.norm(theta)
    rot = Rotation.from_rotvec(theta)
    if angle < 1e-10:
        return Pose(rot, rho)
    k = theta / angle
    kx = _skew(k)
    v = (np.eye(3) + (1.0 - math.cos(angle)) / angle * _skew(k)
         + (1.0 - math.sin(angle) / angle) * (kx @ kx))
    return Pose(rot, v @ rho)


def screw_interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Constant-twist path from a (s=0) to b (s=1).

    The interpolant follows the world-frame screw of b * a^-1, so a pure
    rotation about a fixed world axis stays on that axis for all s.
    """
    delta = se3_log(b.compose(a.inverse()))
    return se3_exp(s * delta).compose(a)


def _skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Euler angles (extrinsic X-Y-Z)

def euler_to_rotation(rx: float, ry: float, rz: float) -> Rotation:
    """Extrinsic X-Y-Z: rotate about world x by rx, then y, then z."""
    return (Rotation.from_axis_angle([0, 0, 1], rz)
            .compose(Rotation.from_axis_angle([0, 1, 0], ry))
            .compose(Rotation.from_axis_angle([1, 0, 0], rx)))


def rotation_to_euler(r: Rotation) -> tuple[float, float, float]:
    """Inverse of euler_to_rotation; ry in [-pi/2, pi/2], others in (-pi, pi].

    At gimbal lock (|ry| = pi/2) the decomposition is ambiguous; rx is set
    to 0 and the residual is absorbed into rz.
    """
    m = r.as_matrix()
    sy = -m[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ry = math.asin(sy)
    if abs(sy) > 1.0 - 1e-10:
        rx = 0.0
        rz = math.atan2(-m[0, 1], m[1, 1])
    else:
        rx = math.atan2(m[2, 1], m[2, 2])
        rz = math.atan2(m[1, 0], m[0, 0])
    return rx, ry, rz


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


# ---------------------------------------------------------------------------
# Point sets and rigid registration

@dataclass(frozen=True, eq=False)
class PointSet:
    """Ordered 3D points with optional per-point weights in [0, 1]."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(len(pts))
            if np.any(w < 0) or np.any(w > 1):
                raise GeometryError("weights must lie in [0, 1]")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)

    def effective_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(self.points))
        return self.weights


def estimate_rigid_transform(src, dst, weights=None) -> Pose:
    """Weighted least-squares rigid transform mapping src onto dst.

    Kabsch/Umeyama without scale: SVD of the weighted cross-covariance,
    with the sign of the smallest singular vector flipped whenever the
    best orthogonal map would be a reflection, so det(R) = +1 always.
    Points with weight 0 are dropped before centroid computation.
    """
    if isinstance(src, PointSet):
        if weights is None:
            weights = src.weights
        src = src.points
    if isinstance(dst, PointSet):
        dst = dst.points
    src = _as_points(src)
    dst = _as_points(dst)
    if len(src) != len(dst):
        raise MismatchedSizes(f"src has {len(src)} points, dst has {len(dst)}")
    if weights is None:
        w = np.ones(len(src))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(len(src))
    keep = w > 0
    src, dst, w = src[keep], dst[keep], w[keep]
    if len(src) < 3:
        raise DegenerateInput(f"need >= 3 weighted points, have {len(src)}")
    wsum = w.sum()
    c_src = (w[:, None] * src).sum(axis=0) / wsum
    c_dst = (w[:, None] * dst).sum(axis=0) / wsum
    h = (w[:, None] * (src - c_src)).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1.0) * 1e-12:
        raise DegenerateInput("points are collinear (cross-covariance rank < 2)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot_m = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    rot = Rotation.from_matrix(rot_m)
    return Pose(rot, c_dst - rot_m @ c_src)


def farthest_point_sample(points, n: int, start_index: int = 0) -> list[int]:
    """Greedy FPS indices: deterministic, ties broken by lowest index."""
    if isinstance(points, PointSet):
        points = points.points
    pts = _as_points(points)
    m = len(pts)
    if not 1 <= n <= m:
        raise InvalidCount(f"n={n} outside [1, {m}]")
    if not 0 <= start_index < m:
        raise InvalidCount(f"start_index={start_index} outside [0, {m})")
    chosen = [start_index]
    d2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for _ in range(n - 1):
        idx = int(np.argmax(d2))  # argmax takes the first (lowest) max index
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((pts - pts[idx]) ** 2, axis=1))
    return chosen


# ---------------------------------------------------------------------------
# Pinhole camera

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")


def project(k: CameraIntrinsics, p) -> tuple[float, float, float]:
    """Camera-frame point to (u, v, depth); raises BehindCamera if z <= 0."""
    p = _as_vec3(p)
    if p[2] <= 0.0:
        raise BehindCamera(f"z={p[2]} <= 0")
    return (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy, float(p[2]))


def unproject(k: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= 0.0:
        raise NonPositiveDepth(f"depth={depth} <= 0")
    return np.array([(u - k.cx) * depth / k.fx,
                     (v - k.cy) * depth / k.fy,
                     depth])


def project_points(k: CameraIntrinsics, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: (N, 3) camera-frame -> ((N, 2) uv, (N,) depth).

    Points with z <= 0 get uv = nan rather than raising; callers mask them.
    """
    pts = _as_points(points)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, k.fx * pts[:, 0] / z + k.cx, np.nan)
        v = np.where(z > 0, k.fy * pts[:, 1] / z + k.cy, np.nan)
    return np.stack([u, v], axis=1), z.copy()


def unproject_points(k: CameraIntrinsics, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    return np.stack([(uv[:, 0] - k.cx) * depth / k.fx,
                     (uv[:, 1] - k.cy) * depth / k.fy,
                     depth], axis=1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with z toward target, x right, y down."""
    eye = _as_vec3(eye)
    forward = _as_vec3(target) - eye
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise GeometryError("eye and target coincide")
    z = forward / fn
    x = np.cross(z, _as_vec3(up))
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise GeometryError("view direction parallel to up vector")
    x = x / xn
    y = np.cross(z, x)
    return Pose(Rotation.from_matrix(np.stack([x, y, z], axis=1)), eye)
