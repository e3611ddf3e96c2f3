import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigsfm.geometry import (
    CameraIntrinsics,
    Pose,
    RelativePose,
    SceneTransform,
    camera_from_unit,
    project,
    project_points,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    random_quat,
    relative_of,
    rotation_geodesic,
)


def random_pose(rng):
    return Pose(random_quat(rng), rng.uniform(-10, 10, size=3))


def pose_close(a, b, tol=1e-9):
    return rotation_geodesic(a.q, b.q) < math.degrees(tol) and np.linalg.norm(a.t - b.t) < tol


class TestProjection:
    def test_identity_unit_camera(self):
        K = CameraIntrinsics(1, 1, 0, 0)
        uv = project(K, Pose.identity(), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(uv, [0.0, 0.0])

    def test_pinhole_arithmetic(self):
        K = CameraIntrinsics(100, 100, 50, 50)
        uv = project(K, Pose.identity(), np.array([1.0, 2.0, 2.0]))
        assert np.allclose(uv, [100.0, 150.0])

    def test_behind_camera(self):
        K = CameraIntrinsics(100, 100, 50, 50)
        assert project(K, Pose.identity(), np.array([0.0, 0.0, -1.0])) is None

    def test_zero_depth_is_behind(self):
        K = CameraIntrinsics(100, 100, 50, 50)
        assert project(K, Pose.identity(), np.array([1.0, 1.0, 0.0])) is None

    def test_ray_through_origin_projects_to_same_pixel(self):
        # zero distortion: all depths along one ray hit one pixel
        rng = np.random.default_rng(7)
        K = CameraIntrinsics(480, 470, 320, 240)
        pose = random_pose(rng)
        direction = pose.to_world(np.array([0.1, -0.2, 1.0])) - pose.t
        pixels = []
        for depth in [0.5, 1.0, 3.0, 17.0, 120.0]:
            uv = project(K, pose, pose.t + depth * direction)
            assert uv is not None
            pixels.append(uv)
        for uv in pixels[1:]:
            assert np.linalg.norm(uv - pixels[0]) < 1e-9

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(3)
        K = CameraIntrinsics(400, 410, 320, 240, k1=-0.03, k2=0.004)
        pose = random_pose(rng)
        X = pose.t + rng.uniform(-5, 5, size=(40, 3))
        uv, z = project_points(K, pose, X)
        for i in range(len(X)):
            single = project(K, pose, X[i])
            if z[i] > 0:
                assert single is not None
                assert np.allclose(uv[i], single, atol=1e-12)
            else:
                assert single is None

    def test_invalid_focal_rejected(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0, 100, 50, 50)


class TestPoseAlgebra:
    def test_compose_inverse_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            p = random_pose(rng)
            r = p.inverse().compose(p)
            assert rotation_geodesic(r.q, [1, 0, 0, 0]) < 1e-9
            assert np.linalg.norm(r.t) < 1e-9

    def test_quaternion_stays_normalized(self):
        rng = np.random.default_rng(12)
        p = random_pose(rng)
        for _ in range(200):
            p = p.compose(random_pose(rng))
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9

    def test_to_frame_to_world_roundtrip(self):
        rng = np.random.default_rng(13)
        p = random_pose(rng)
        X = rng.uniform(-5, 5, size=(20, 3))
        assert np.allclose(p.to_world(p.to_frame(X)), X, atol=1e-10)


class TestUnitCameraRelation:
    def test_identity_unit_yields_camera(self):
        rng = np.random.default_rng(21)
        cam = random_pose(rng)
        rel = relative_of(Pose.identity(), cam)
        assert np.allclose(rel.t, cam.t) and rotation_geodesic(rel.q, cam.q) < 1e-9

    def test_self_relative_is_identity(self):
        rng = np.random.default_rng(22)
        p = random_pose(rng)
        rel = relative_of(p, p)
        assert rotation_geodesic(rel.q, [1, 0, 0, 0]) < 1e-9
        assert np.linalg.norm(rel.t) < 1e-9

    def test_identity_relative_returns_unit(self):
        rng = np.random.default_rng(23)
        unit = random_pose(rng)
        cam = camera_from_unit(unit, RelativePose.identity())
        assert pose_close(cam, unit)

    def test_identity_unit_returns_rel_as_pose(self):
        rng = np.random.default_rng(24)
        rel = RelativePose(random_quat(rng), rng.uniform(-3, 3, 3))
        cam = camera_from_unit(Pose.identity(), rel)
        assert pose_close(cam, rel.as_pose())

    def test_roundtrip_1000_random_pairs(self):
        # camera_from_unit is the exact inverse of relative_of
        rng = np.random.default_rng(25)
        for _ in range(1000):
            unit, cam = random_pose(rng), random_pose(rng)
            back = camera_from_unit(unit, relative_of(unit, cam))
            assert rotation_geodesic(back.q, cam.q) < math.degrees(1e-9)
            assert np.linalg.norm(back.t - cam.t) < 1e-9

    def test_relative_matches_stated_formulas(self):
        rng = np.random.default_rng(26)
        unit, cam = random_pose(rng), random_pose(rng)
        rel = relative_of(unit, cam)
        R_u, R_c = unit.rotation, cam.rotation
        assert np.allclose(rel.as_pose().rotation, R_c @ R_u.T, atol=1e-12)
        assert np.allclose(rel.t, R_u @ (cam.t - unit.t), atol=1e-12)
        back = camera_from_unit(unit, rel)
        assert np.allclose(back.rotation, rel.as_pose().rotation @ R_u, atol=1e-12)
        assert np.allclose(back.t, R_u.T @ rel.t + unit.t, atol=1e-12)


class TestRotationGeodesic:
    def test_equal_quats(self):
        q = quat_normalize([0.3, 0.5, -0.2, 0.7])
        assert rotation_geodesic(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_ninety_degrees_about_z(self):
        b = quat_from_rotvec([0, 0, math.pi / 2])
        assert rotation_geodesic([1, 0, 0, 0], b) == pytest.approx(90.0, abs=1e-9)

    def test_double_cover(self):
        rng = np.random.default_rng(31)
        q = random_quat(rng)
        assert rotation_geodesic(q, -q) == pytest.approx(0.0, abs=1e-9)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(32)
        for _ in range(100):
            a, b = random_quat(rng), random_quat(rng)
            d = rotation_geodesic(a, b)
            assert 0.0 <= d <= 180.0
            assert d == pytest.approx(rotation_geodesic(b, a), abs=1e-9)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(33)
        for _ in range(200):
            a, b, c = (random_quat(rng) for _ in range(3))
            assert rotation_geodesic(a, c) <= rotation_geodesic(a, b) + rotation_geodesic(b, c) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_quat_multiply_preserves_norm(seed):
    rng = np.random.default_rng(seed)
    q = quat_multiply(random_quat(rng), random_quat(rng))
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12


class TestSceneTransform:
    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(41)
        T = SceneTransform(random_quat(rng), rng.uniform(-5, 5, 3))
        I = T.compose(T.inverse())
        assert rotation_geodesic(I.q, [1, 0, 0, 0]) < 1e-9
        assert np.linalg.norm(I.t) < 1e-9

    def test_between_poses_recovers_transform(self):
        rng = np.random.default_rng(42)
        T = SceneTransform(random_quat(rng), rng.uniform(-5, 5, 3))
        coarse = random_pose(rng)
        fine = T.apply_pose(coarse)
        T2 = SceneTransform.between_poses(fine, coarse)
        assert rotation_geodesic(T.q, T2.q) < 1e-9
        assert np.linalg.norm(T.t - T2.t) < 1e-9

    def test_pose_action_consistent_with_point_action(self):
        # projecting transformed points through transformed poses is invariant
        rng = np.random.default_rng(43)
        K = CameraIntrinsics(300, 300, 200, 150)
        T = SceneTransform(random_quat(rng), rng.uniform(-5, 5, 3))
        pose = random_pose(rng)
        X = pose.t + pose.to_world(np.array([0.2, 0.1, 4.0])) - pose.t
        before = project(K, pose, X)
        after = project(K, T.apply_pose(pose), T.apply_points(X))
        assert before is not None and after is not None
        assert np.allclose(before, after, atol=1e-8)
