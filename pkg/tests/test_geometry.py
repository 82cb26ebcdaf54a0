"""Core geometry: poses, registration, sampling, projection."""

import math

import numpy as np
import pytest

from flowact.geometry import (
    BehindCamera,
    CameraIntrinsics,
    DegenerateInput,
    InvalidCount,
    MismatchedSizes,
    NonPositiveDepth,
    Pose,
    PointSet,
    Rotation,
    compose,
    estimate_rigid_transform,
    euler_to_rotation,
    farthest_point_sample,
    invert,
    look_at,
    pose_error,
    project,
    project_points,
    rotation_to_euler,
    screw_interpolate,
    unproject,
)


def random_rotation(rng) -> Rotation:
    return Rotation(rng.normal(size=4))


def random_pose(rng, t_scale=1.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-t_scale, t_scale, size=3))


class TestPoseGroup:
    def test_identity_compose(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        q = compose(Pose.identity(), p)
        assert pose_error(p, q) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_inverse(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = random_pose(rng)
            dt, dr = pose_error(compose(p, invert(p)), Pose.identity())
            assert dt < 1e-9 and dr < 1e-9

    def test_commuting_translations(self):
        a = Pose.from_translation([1, 0, 0])
        b = Pose.from_translation([0, 2, 0])
        np.testing.assert_allclose(compose(a, b).translation, [1, 2, 0])

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            dt, dr = pose_error(left, right)
            assert dt < 1e-9 and dr < 1e-9

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        pts = rng.normal(size=(20, 3))
        hom = np.concatenate([pts, np.ones((20, 1))], axis=1)
        expected = (p.as_matrix() @ hom.T).T[:, :3]
        np.testing.assert_allclose(p.apply(pts), expected, atol=1e-12)

    def test_quaternion_canonical(self):
        r = Rotation(np.array([-1.0, 0.0, 0.0, 0.0]))
        assert r.q[0] >= 0
        assert np.linalg.norm(r.q) == pytest.approx(1.0, abs=1e-12)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            r = random_rotation(rng)
            r2 = Rotation.from_matrix(r.as_matrix())
            assert r.angle_to(r2) < 1e-9


class TestRigidTransform:
    def test_identity_on_same_cloud(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(10, 3))
        t = estimate_rigid_transform(pts, pts)
        dt, dr = pose_error(t, Pose.identity())
        assert dt < 1e-9 and dr < 1e-9

    def test_pure_translation(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(8, 3))
        t = estimate_rigid_transform(pts, pts + np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(t.translation, [1, 0, 0], atol=1e-9)
        assert t.rotation.angle < 1e-9

    def test_axis_aligned_rotation(self):
        src = np.eye(3)
        rot = Rotation.from_axis_angle([0, 0, 1], math.pi / 2)
        t = estimate_rigid_transform(src, rot.apply(src))
        np.testing.assert_allclose(t.rotation.apply([1, 0, 0]), [0, 1, 0], atol=1e-9)
        np.testing.assert_allclose(t.translation, 0, atol=1e-9)

    def test_recovers_random_poses(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            true = random_pose(rng)
            src = rng.normal(size=(32, 3))
            t = estimate_rigid_transform(src, true.apply(src))
            dt, dr = pose_error(t, true)
            assert dt < 1e-9 and dr < 1e-6

    def test_weights_exclude_outliers(self):
        rng = np.random.default_rng(8)
        true = random_pose(rng)
        src = rng.normal(size=(20, 3))
        dst = true.apply(src)
        dst[0] += 100.0  # corrupt one correspondence, then mask it out
        w = np.ones(20)
        w[0] = 0.0
        t = estimate_rigid_transform(src, dst, weights=w)
        dt, dr = pose_error(t, true)
        assert dt < 1e-9 and dr < 1e-6

    def test_reflection_fixed_to_proper_rotation(self):
        # mirror image: best orthogonal map is a reflection, output must not be
        rng = np.random.default_rng(9)
        src = rng.normal(size=(12, 3))
        dst = src * np.array([1.0, 1.0, -1.0])
        t = estimate_rigid_transform(src, dst)
        assert np.linalg.det(t.rotation.as_matrix()) == pytest.approx(1.0, abs=1e-9)

    def test_conjugation_invariance(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            g = random_pose(rng)
            true = random_pose(rng)
            src = rng.normal(size=(16, 3))
            dst = true.apply(src)
            t_moved = estimate_rigid_transform(g.apply(src), g.apply(dst))
            expected = compose(compose(g, true), invert(g))
            dt, dr = pose_error(t_moved, expected)
            assert dt < 1e-8 and dr < 1e-8

    def test_errors(self):
        with pytest.raises(MismatchedSizes):
            estimate_rigid_transform(np.zeros((4, 3)), np.zeros((5, 3)))
        with pytest.raises(DegenerateInput):
            estimate_rigid_transform(np.zeros((2, 3)), np.zeros((2, 3)))
        line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        with pytest.raises(DegenerateInput):
            estimate_rigid_transform(line, line + 1.0)

    def test_pointset_weights_used(self):
        rng = np.random.default_rng(11)
        true = random_pose(rng)
        src = rng.normal(size=(10, 3))
        dst = true.apply(src)
        dst[3] += 5.0
        w = np.ones(10)
        w[3] = 0.0
        t = estimate_rigid_transform(PointSet(src, w), PointSet(dst))
        assert pose_error(t, true)[0] < 1e-9


class TestFarthestPointSample:
    def test_unit_square_opposite_corner(self):
        corners = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        idx = farthest_point_sample(corners, 2, start_index=0)
        assert idx == [0, 3]

    def test_exhaustive(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(7, 3))
        idx = farthest_point_sample(pts, 7, start_index=2)
        assert sorted(idx) == list(range(7))
        assert idx == farthest_point_sample(pts, 7, start_index=2)

    def test_beats_random_subset_spread(self):
        # FPS min pairwise distance should beat a uniform random pick
        rng = np.random.default_rng(13)
        wins = 0
        for trial in range(100):
            pts = rng.uniform(size=(100, 3))
            fps_idx = farthest_point_sample(pts, 16, start_index=0)
            rand_idx = rng.choice(100, size=16, replace=False)
            if _min_pairwise(pts[fps_idx]) >= _min_pairwise(pts[rand_idx]):
                wins += 1
        assert wins >= 99

    def test_invalid_count(self):
        pts = np.zeros((4, 3))
        with pytest.raises(InvalidCount):
            farthest_point_sample(pts, 0)
        with pytest.raises(InvalidCount):
            farthest_point_sample(pts, 5)

    def test_tie_breaks_lowest_index(self):
        # equilateral choices: index 1 and 2 equidistant from 0
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
        assert farthest_point_sample(pts, 2, start_index=0) == [0, 1]


def _min_pairwise(pts):
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    return d[~np.eye(len(pts), dtype=bool)].min()


class TestCamera:
    K = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)

    def test_optical_axis(self):
        assert project(self.K, [0, 0, 1]) == pytest.approx((50.0, 50.0, 1.0))

    def test_unit_offset(self):
        assert project(self.K, [1, 0, 1]) == pytest.approx((150.0, 50.0, 1.0))

    def test_round_trip(self):
        rng = np.random.default_rng(14)
        for _ in range(1000):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.1, 5)])
            u, v, d = project(self.K, p)
            np.testing.assert_allclose(unproject(self.K, u, v, d), p, atol=1e-9)

    def test_unproject_examples(self):
        np.testing.assert_allclose(unproject(self.K, 50, 50, 1.0), [0, 0, 1], atol=1e-12)
        np.testing.assert_allclose(unproject(self.K, 150, 50, 1.0), [1, 0, 1], atol=1e-12)

    def test_errors(self):
        with pytest.raises(BehindCamera):
            project(self.K, [0, 0, 0])
        with pytest.raises(BehindCamera):
            project(self.K, [0, 0, -1])
        with pytest.raises(NonPositiveDepth):
            unproject(self.K, 50, 50, 0.0)

    def test_project_points_masks_behind(self):
        uv, z = project_points(self.K, [[0, 0, 1], [0, 0, -1]])
        np.testing.assert_allclose(uv[0], [50, 50])
        assert np.isnan(uv[1]).all()
        assert z[1] == -1.0

    def test_bad_intrinsics(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)

    def test_look_at_frame(self):
        cam = look_at(eye=[1, 0, 0.5], target=[0, 0, 0.0])
        m = cam.rotation.as_matrix()
        # z column points from eye toward target
        fwd = np.array([-1, 0, -0.5]) / np.linalg.norm([1, 0, 0.5])
        np.testing.assert_allclose(m[:, 2], fwd, atol=1e-12)
        # y column (image down) should have negative world-z component
        assert m[2, 1] < 0


class TestEuler:
    def test_zero_is_identity(self):
        assert euler_to_rotation(0, 0, 0).angle < 1e-12

    def test_yaw_quarter_turn(self):
        r = euler_to_rotation(0, 0, math.pi / 2)
        np.testing.assert_allclose(r.apply([1, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_order_is_extrinsic_xyz(self):
        rx, ry, rz = 0.3, -0.2, 0.9
        r = euler_to_rotation(rx, ry, rz)
        mx = Rotation.from_axis_angle([1, 0, 0], rx).as_matrix()
        my = Rotation.from_axis_angle([0, 1, 0], ry).as_matrix()
        mz = Rotation.from_axis_angle([0, 0, 1], rz).as_matrix()
        np.testing.assert_allclose(r.as_matrix(), mz @ my @ mx, atol=1e-12)

    def test_round_trip_fixed_point(self):
        rng = np.random.default_rng(15)
        for _ in range(1000):
            r = random_rotation(rng)
            e = rotation_to_euler(r)
            assert -math.pi / 2 <= e[1] <= math.pi / 2
            r2 = euler_to_rotation(*e)
            assert r.angle_to(r2) < 1e-9
            # one cycle reaches a fixed point of the representation
            assert rotation_to_euler(r2) == pytest.approx(e, abs=1e-9)

    def test_gimbal_lock_convention(self):
        r = euler_to_rotation(0.4, math.pi / 2, 0.1)
        e = rotation_to_euler(r)
        assert e[0] == 0.0
        assert euler_to_rotation(*e).angle_to(r) < 1e-9


class TestScrewInterpolation:
    def test_endpoints(self):
        rng = np.random.default_rng(16)
        a, b = random_pose(rng), random_pose(rng)
        assert pose_error(screw_interpolate(a, b, 0.0), a)[0] < 1e-9
        dt, dr = pose_error(screw_interpolate(a, b, 1.0), b)
        assert dt < 1e-9 and dr < 1e-9

    def test_pure_translation_is_linear(self):
        a = Pose.from_translation([0, 0, 0])
        b = Pose.from_translation([2, 4, 6])
        mid = screw_interpolate(a, b, 0.25)
        np.testing.assert_allclose(mid.translation, [0.5, 1, 1.5], atol=1e-12)
        assert mid.rotation.angle < 1e-12

    def test_rotation_about_fixed_pivot_keeps_pivot(self):
        pivot = np.array([0.2, -0.1, 0.4])
        axis = np.array([0.0, 1.0, 0.0])
        a = Pose(Rotation.from_axis_angle([1, 0, 0], 0.3), [0.5, 0.2, 0.1])
        rot = Rotation.from_axis_angle(axis, 1.2)
        delta = compose(Pose.from_translation(pivot),
                        compose(Pose(rot), Pose.from_translation(-pivot)))
        b = compose(delta, a)
        # pivot maps to itself under the world delta at every s
        for s in [0.25, 0.5, 0.75]:
            p_s = screw_interpolate(a, b, s)
            world_delta = compose(p_s, invert(a))
            np.testing.assert_allclose(world_delta.apply(pivot), pivot, atol=1e-9)
