"""Moving-object detection pipeline pieces and their file formats."""

import numpy as np
import pytest

from flowact.extraction import (
    BBox,
    DegenerateBackground,
    EmptyInput,
    EmptyResult,
    ExtractionConfig,
    NoMovingObject,
    TrackSet,
    detect_moving_points,
    erode_mask,
    extract_episode,
    max_bounding_box,
    read_depth_map,
    read_mask,
    read_tracks,
    remove_camera_motion,
    seed_grid_points,
    write_depth_map,
    write_mask,
    write_tracks,
)
from flowact.flowdata import ParseError, SchemaError
from flowact.geometry import CameraIntrinsics


class TestSeedGrid:
    def test_small_grid(self):
        pts = seed_grid_points(10, 10, 5)
        assert pts.tolist() == [[0, 0], [5, 0], [0, 5], [5, 5]]

    def test_full_mask_empty(self):
        with pytest.raises(EmptyResult):
            seed_grid_points(10, 10, 5, exclude=np.ones((10, 10), dtype=bool))

    def test_half_mask(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[:, :5] = True  # left half masked
        pts = seed_grid_points(10, 10, 5, exclude=mask)
        assert pts.tolist() == [[5, 0], [5, 5]]


def make_tracks(num_points=6, num_frames=5, width=100, height=100):
    uv = np.full((num_points, num_frames, 2), 50.0)
    vis = np.ones((num_points, num_frames), dtype=np.uint8)
    return uv, vis, width, height


class TestDetectMoving:
    def test_static_tracks_empty(self):
        uv, vis, w, h = make_tracks()
        assert detect_moving_points(TrackSet(uv, vis, w, h), 0.05) == []

    def test_single_mover(self):
        uv, vis, w, h = make_tracks()
        # 30% of the diagonal (~141 px): move point 2 by 45 px
        uv[2, -1] = [95.0, 50.0]
        assert detect_moving_points(TrackSet(uv, vis, w, h), 0.05) == [2]

    def test_visibility_excluded(self):
        uv, vis, w, h = make_tracks()
        uv[1, 3] = [99.0, 99.0]  # large jump but invisible at that frame
        vis[1, 3] = 0
        assert detect_moving_points(TrackSet(uv, vis, w, h), 0.05) == []

    def test_threshold_validation(self):
        uv, vis, w, h = make_tracks()
        with pytest.raises(ValueError):
            detect_moving_points(TrackSet(uv, vis, w, h), 0.0)


class TestBBox:
    def test_single_point_degenerate(self):
        assert max_bounding_box([(3, 4)], 0, 10, 10) == BBox(3, 4, 3, 4)

    def test_margin(self):
        assert max_bounding_box([(1, 1), (4, 7)], 1, 100, 100) == BBox(0, 0, 5, 8)

    def test_clipped_to_image(self):
        box = max_bounding_box([(2, 2), (9, 9)], 10, 12, 12)
        assert box == BBox(0, 0, 11, 11)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            max_bounding_box([], 0, 10, 10)

    def test_iou(self):
        a = BBox(0, 0, 9, 9)
        assert a.iou(a) == 1.0
        assert a.iou(BBox(10, 10, 12, 12)) == 0.0


class TestErode:
    def test_radius_zero_identity(self):
        mask = np.random.default_rng(0).random((8, 8)) > 0.5
        np.testing.assert_array_equal(erode_mask(mask, 0), mask)

    def test_solid_square_to_center(self):
        mask = np.zeros((7, 7), dtype=bool)
        mask[2:5, 2:5] = True
        out = erode_mask(mask, 1)
        expected = np.zeros((7, 7), dtype=bool)
        expected[3, 3] = True
        np.testing.assert_array_equal(out, expected)

    def test_subset_and_composition(self):
        rng = np.random.default_rng(1)
        mask = rng.random((20, 20)) > 0.3
        for r in (0, 1, 2):
            assert not np.any(erode_mask(mask, r) & ~mask)
        np.testing.assert_array_equal(erode_mask(mask, 3),
                                      erode_mask(erode_mask(mask, 1), 2))


class TestCameraMotionRemoval:
    def test_zero_motion_unchanged(self):
        uv, vis, w, h = make_tracks()
        uv += np.random.default_rng(2).uniform(-20, 20, size=(6, 1, 2))
        tracks = TrackSet(uv, vis, w, h)
        out = remove_camera_motion(tracks, [0, 1, 2, 3])
        np.testing.assert_allclose(out.uv, tracks.uv, atol=1e-9)

    def test_exact_model_class_removed(self):
        rng = np.random.default_rng(3)
        uv, vis, w, h = make_tracks(num_points=8)
        uv[:, 0] = rng.uniform(10, 90, size=(8, 2))
        shift = np.array([3.0, -2.0])
        for t in range(1, 5):
            uv[:, t] = uv[:, 0] + t * shift  # global translation per frame
        out = remove_camera_motion(TrackSet(uv, vis, w, h), list(range(8)))
        for t in range(5):
            np.testing.assert_allclose(out.uv[:, t], uv[:, 0], atol=1e-9)

    def test_pan_zoom_recovers_object_motion(self):
        rng = np.random.default_rng(4)
        num_bg, frames = 12, 6
        bg0 = rng.uniform(10, 90, size=(num_bg, 2))
        obj0 = np.array([[40.0, 40.0], [45.0, 42.0], [42.0, 47.0]])
        obj_motion = np.array([2.5, 1.0])
        uv = np.zeros((num_bg + 3, frames, 2))
        for t in range(frames):
            # true scene: background static, object translating
            scene_bg = bg0
            scene_obj = obj0 + t * obj_motion
            # camera pan+zoom: similarity with growing scale and shift
            s = 1.0 + 0.02 * t
            ang = 0.01 * t
            mat = s * np.array([[np.cos(ang), -np.sin(ang)],
                                [np.sin(ang), np.cos(ang)]])
            shift = np.array([1.5 * t, -0.8 * t])
            uv[:num_bg, t] = scene_bg @ mat.T + shift
            uv[num_bg:, t] = scene_obj @ mat.T + shift
        vis = np.ones((num_bg + 3, frames), dtype=np.uint8)
        out = remove_camera_motion(TrackSet(uv, vis, 100, 100), list(range(num_bg)))
        for t in range(frames):
            expected = obj0 + t * obj_motion
            # fit maps frame-0 *warped* coords; at t=0 warp is identity
            np.testing.assert_allclose(out.uv[num_bg:, t], expected, atol=0.5)

    def test_degenerate_background(self):
        uv, vis, w, h = make_tracks()
        with pytest.raises(DegenerateBackground):
            remove_camera_motion(TrackSet(uv, vis, w, h), [0, 1])
        # collinear background points
        uv[0, :, :] = [10.0, 10.0]
        uv[1, :, :] = [20.0, 10.0]
        uv[2, :, :] = [30.0, 10.0]
        with pytest.raises(DegenerateBackground):
            remove_camera_motion(TrackSet(uv, vis, w, h), [0, 1, 2])


K = CameraIntrinsics(fx=120.0, fy=120.0, cx=50.0, cy=50.0, width=100, height=100)


def synthetic_episode(num_bg=8, num_obj=5, frames=5):
    """Hand-built episode: object translating right, static background."""
    rng = np.random.default_rng(5)
    total = num_bg + num_obj
    uv = np.zeros((total, frames, 2))
    uv[:num_bg, 0] = rng.uniform(5, 95, size=(num_bg, 2))
    uv[num_bg:, 0] = rng.uniform(30, 45, size=(num_obj, 2))
    for t in range(1, frames):
        uv[:num_bg, t] = uv[:num_bg, 0]
        uv[num_bg:, t] = uv[num_bg:, 0] + [9.0 * t, 0.0]
    vis = np.ones((total, frames), dtype=np.uint8)
    tracks = TrackSet(uv, vis, 100, 100)
    depth = np.full((frames, 100, 100), 1.5)
    gripper = np.zeros((100, 100), dtype=bool)
    return tracks, depth, gripper, num_bg


class TestExtractEpisode:
    def test_translating_object_found(self):
        tracks, depth, gripper, num_bg = synthetic_episode()
        flow, bbox = extract_episode(tracks, depth, gripper, K,
                                     ExtractionConfig(margin_px=2, erosion_radius=0))
        assert flow.num_points == 5
        assert flow.num_timesteps == 5
        # every selected track comes from the moving object
        np.testing.assert_allclose(flow.depth, 1.5)
        # box contains all object points at t=0
        obj0 = tracks.uv[num_bg:, 0]
        assert bbox.u_min <= obj0[:, 0].min() and bbox.u_max >= obj0[:, 0].max()
        assert bbox.v_min <= obj0[:, 1].min() and bbox.v_max >= obj0[:, 1].max()

    def test_static_scene_raises(self):
        tracks, depth, gripper, _ = synthetic_episode(num_obj=0)
        with pytest.raises(NoMovingObject):
            extract_episode(tracks, depth, gripper, K)

    def test_gripper_mask_excludes(self):
        tracks, depth, gripper, num_bg = synthetic_episode()
        gripper[:, :] = True  # everything inside the gripper mask
        with pytest.raises(NoMovingObject):
            extract_episode(tracks, depth, gripper, K)

    def test_invalid_depth_marks_invisible(self):
        tracks, depth, gripper, num_bg = synthetic_episode()
        depth[2] = -1.0  # whole frame invalid
        flow, _ = extract_episode(tracks, depth, gripper, K,
                                  ExtractionConfig(erosion_radius=0))
        assert not flow.visibility[2].any()
        assert flow.visibility[1].all()

    def test_selection_count_matches_recomputation(self):
        tracks, depth, gripper, num_bg = synthetic_episode()
        config = ExtractionConfig(margin_px=2, erosion_radius=1)
        flow, bbox = extract_episode(tracks, depth, gripper, K, config)
        moving = detect_moving_points(tracks, config.threshold_frac)
        box_mask = np.zeros((100, 100), dtype=bool)
        box_mask[bbox.v_min:bbox.v_max + 1, bbox.u_min:bbox.u_max + 1] = True
        box_mask = erode_mask(box_mask, config.erosion_radius)
        u0 = np.rint(tracks.uv[:, 0, 0]).astype(int)
        v0 = np.rint(tracks.uv[:, 0, 1]).astype(int)
        expected = [m for m in moving
                    if not gripper[v0[m], u0[m]] and box_mask[v0[m], u0[m]]]
        assert flow.num_points == len(expected)


class TestFileFormats:
    def test_tracks_round_trip(self, tmp_path):
        tracks, *_ = synthetic_episode()
        path = tmp_path / "tracks.json"
        write_tracks(tracks, path)
        back = read_tracks(path)
        np.testing.assert_allclose(back.uv, tracks.uv, atol=1e-4)
        np.testing.assert_array_equal(back.visible, tracks.visible)

    def test_depth_map_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        depth = rng.uniform(0.2, 3.0, size=(30, 40)).astype(np.float32)
        path = tmp_path / "d.dmap"
        write_depth_map(depth, path)
        back = read_depth_map(path)
        np.testing.assert_array_equal(back.astype(np.float32), depth)
        # second write is byte-identical
        path2 = tmp_path / "d2.dmap"
        write_depth_map(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_depth_map_malformed(self, tmp_path):
        depth = np.ones((4, 4), dtype=np.float32)
        path = tmp_path / "d.dmap"
        write_depth_map(depth, path)
        blob = bytearray(path.read_bytes())
        short = tmp_path / "short.dmap"
        short.write_bytes(bytes(blob[:-3]))
        with pytest.raises(ParseError):
            read_depth_map(short)
        bad_magic = tmp_path / "m.dmap"
        blob2 = bytearray(blob)
        blob2[:4] = b"XXXX"
        bad_magic.write_bytes(bytes(blob2))
        with pytest.raises(SchemaError):
            read_depth_map(bad_magic)
        bad_ver = tmp_path / "v.dmap"
        blob3 = bytearray(blob)
        blob3[4:8] = (9).to_bytes(4, "little")
        bad_ver.write_bytes(bytes(blob3))
        with pytest.raises(SchemaError):
            read_depth_map(bad_ver)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        mask = rng.random((17, 23)) > 0.5  # odd sizes exercise bit padding
        path = tmp_path / "m.pbm"
        write_mask(mask, path)
        np.testing.assert_array_equal(read_mask(path), mask)
