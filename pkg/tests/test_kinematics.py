"""Forward kinematics, Jacobian, and damped-least-squares IK."""

import math

import numpy as np
import pytest

from flowact.geometry import Pose, Rotation, pose_error
from flowact.kinematics import (
    Joint,
    JointChain,
    SizeMismatch,
    desk_arm,
    forward_kinematics,
    is_reachable,
    jacobian,
    read_chain,
    solve_ik,
    write_chain,
)

ARM = desk_arm()


def random_q(rng, chain=ARM, margin=0.1):
    lo, hi = chain.limits()
    span = hi - lo
    return rng.uniform(lo + margin * span, hi - margin * span)


def fk_matrix_oracle(chain, q):
    """Independent FK: explicit 4x4 homogeneous chain product."""
    def rot_about(axis, angle):
        axis = np.asarray(axis, dtype=np.float64)
        kx = np.array([[0, -axis[2], axis[1]],
                       [axis[2], 0, -axis[0]],
                       [-axis[1], axis[0], 0]])
        m = np.eye(4)
        m[:3, :3] = (np.eye(3) + math.sin(angle) * kx
                     + (1 - math.cos(angle)) * (kx @ kx))
        return m

    total = chain.base.as_matrix()
    for joint, angle in zip(chain.joints, q):
        total = total @ joint.parent.as_matrix() @ rot_about(joint.axis, angle)
    return total @ chain.tool.as_matrix()


class TestForwardKinematics:
    def test_zero_configuration_closed_form(self):
        pose = forward_kinematics(ARM, np.zeros(6))
        # pure z-translations stack up; all joints at zero add no rotation
        expected_z = 0.15 + 0.10 + 0.28 + 0.28 + 0.10 + 0.08 + 0.10
        np.testing.assert_allclose(pose.translation, [0, 0, expected_z], atol=1e-12)
        assert pose.rotation.angle < 1e-12

    def test_base_joint_rotates_tool_about_base_axis(self):
        q = np.array([0.0, 0.5, 0.3, 0.0, 0.4, 0.0])
        p0 = forward_kinematics(ARM, q)
        theta = 0.8
        q2 = q.copy()
        q2[0] = theta
        p1 = forward_kinematics(ARM, q2)
        rot = Rotation.from_axis_angle([0, 0, 1], theta)
        np.testing.assert_allclose(p1.translation, rot.apply(p0.translation), atol=1e-9)

    def test_matches_matrix_product_oracle(self):
        rng = np.random.default_rng(20)
        for _ in range(100):
            q = random_q(rng)
            pose = forward_kinematics(ARM, q)
            np.testing.assert_allclose(pose.as_matrix(), fk_matrix_oracle(ARM, q),
                                       atol=1e-9)

    def test_wrap_consistency(self):
        # joints with limits wide enough admit q and q + 2pi identically
        wide = JointChain(
            joints=tuple(Joint(j.parent, j.axis, -4 * math.pi, 4 * math.pi)
                         for j in ARM.joints),
            tool=ARM.tool,
        )
        rng = np.random.default_rng(21)
        q = rng.uniform(-1, 1, size=6)
        a = forward_kinematics(wide, q)
        b = forward_kinematics(wide, q + 2 * math.pi)
        dt, dr = pose_error(a, b)
        assert dt < 1e-9 and dr < 1e-9

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            forward_kinematics(ARM, np.zeros(5))


class TestJacobian:
    def test_textbook_single_column(self):
        # z-axis joint at origin, tool at (1, 0, 0): column (0,1,0, 0,0,1)
        chain = JointChain(
            joints=(
                Joint(Pose.identity(), np.array([0.0, 0, 1]), -3.0, 3.0),
                Joint(Pose.identity(), np.array([0.0, 0, 1]), -3.0, 3.0),
                Joint(Pose.identity(), np.array([0.0, 0, 1]), -3.0, 3.0),
                Joint(Pose.identity(), np.array([0.0, 0, 1]), -3.0, 3.0),
                Joint(Pose.identity(), np.array([0.0, 0, 1]), -3.0, 3.0),
            ),
            tool=Pose.from_translation([1.0, 0.0, 0.0]),
        )
        jac = jacobian(chain, np.zeros(5))
        np.testing.assert_allclose(jac[:, 0], [0, 1, 0, 0, 0, 1], atol=1e-12)

    def test_locked_joint_column_reported(self):
        locked = JointChain(
            joints=(ARM.joints[0],
                    Joint(ARM.joints[1].parent, ARM.joints[1].axis, 0.3, 0.3 + 1e-9),
                    *ARM.joints[2:]),
            tool=ARM.tool,
        )
        jac = jacobian(locked, np.array([0.1, 0.3, 0.2, 0.0, 0.5, 0.0]))
        assert jac.shape == (6, 6)
        assert np.linalg.norm(jac[:, 1]) > 0  # still present, not masked

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(22)
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            q = random_q(rng)
            jac = jacobian(ARM, q)
            fd = np.zeros_like(jac)
            base = forward_kinematics(ARM, q)
            for i in range(6):
                qp, qm = q.copy(), q.copy()
                qp[i] += h
                qm[i] -= h
                pp = forward_kinematics(ARM, qp)
                pm = forward_kinematics(ARM, qm)
                fd[:3, i] = (pp.translation - pm.translation) / (2 * h)
                rel = pp.rotation.compose(pm.rotation.inverse())
                fd[3:, i] = rel.as_rotvec() / (2 * h)
            del base
            worst = max(worst, np.max(np.abs(jac - fd)))
        assert worst < 1e-5


class TestSolveIK:
    def test_fixed_point(self):
        rng = np.random.default_rng(23)
        q0 = random_q(rng)
        target = forward_kinematics(ARM, q0)
        q = solve_ik(ARM, target, q0)
        np.testing.assert_allclose(q, q0, atol=1e-9)

    def test_unreachable_far_target(self):
        target = Pose.from_translation([10.0 * ARM.reach(), 0, 0])
        assert solve_ik(ARM, target, ARM.neutral()) is None

    def test_round_trip_from_neutral(self):
        rng = np.random.default_rng(24)
        ok = 0
        for _ in range(100):
            target = forward_kinematics(ARM, random_q(rng))
            q = solve_ik(ARM, target, ARM.neutral(), tol_pos=1e-3, tol_rot=1e-2)
            if q is None:
                continue
            dt, dr = pose_error(forward_kinematics(ARM, q), target)
            assert dt < 1e-3 and dr < 1e-2
            lo, hi = ARM.limits()
            assert np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12)
            ok += 1
        assert ok >= 95

    def test_limits_always_respected(self):
        rng = np.random.default_rng(25)
        lo, hi = ARM.limits()
        for _ in range(30):
            target = forward_kinematics(ARM, random_q(rng))
            q = solve_ik(ARM, target, ARM.neutral())
            if q is not None:
                assert np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12)

    def test_bad_tolerances(self):
        with pytest.raises(ValueError):
            solve_ik(ARM, Pose.identity(), ARM.neutral(), tol_pos=0.0)


class TestIsReachable:
    def test_fk_targets_reachable(self):
        # numerical IK is not complete; a small miss rate on extreme
        # wrist-wrapped configurations is expected
        rng = np.random.default_rng(26)
        hits = 0
        for _ in range(25):
            target = forward_kinematics(ARM, random_q(rng))
            hits += is_reachable(ARM, target)
        assert hits >= 23

    def test_far_target_unreachable(self):
        assert not is_reachable(ARM, Pose.from_translation([10.0, 0, 0]))

    def test_deterministic(self):
        rng = np.random.default_rng(27)
        targets = [forward_kinematics(ARM, random_q(rng)) for _ in range(10)]
        first = [is_reachable(ARM, t) for t in targets]
        second = [is_reachable(ARM, t) for t in targets]
        assert first == second


class TestChainFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "arm.json"
        write_chain(ARM, path)
        back = read_chain(path)
        assert back.num_joints == ARM.num_joints
        rng = np.random.default_rng(28)
        for _ in range(10):
            q = random_q(rng)
            dt, dr = pose_error(forward_kinematics(back, q),
                                forward_kinematics(ARM, q))
            assert dt < 1e-12 and dr < 1e-12
