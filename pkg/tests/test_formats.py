import numpy as np
import pytest

from rigsfm.config import PipelineConfig, load_config, save_config
from rigsfm.errors import ParseError
from rigsfm.formats import (
    CorrespondenceData,
    LabelTable,
    RawMatches,
    read_anchor,
    read_correspondences,
    read_labels,
    read_ply,
    read_priors,
    read_rig,
    read_trajectory,
    write_anchor,
    write_correspondences,
    write_labels,
    write_ply,
    write_priors,
    write_rig,
    write_trajectory,
)
from rigsfm.geometry import (
    CameraIntrinsics,
    Pose,
    RelativePose,
    SceneTransform,
    random_quat,
    rotation_geodesic,
)
from rigsfm.model import Frame, Observation, RigCamera


class TestCorrespondenceFile:
    def test_minimal_roundtrip(self, tmp_path):
        data = CorrespondenceData()
        fa = Frame(0, 0, 0, 640, 480)
        fb = Frame(1, 1, 0, 640, 480)
        for i in range(3):
            fa.observations.append(Observation(np.array([10.5 + i, 20.25]), 2))
            fb.observations.append(Observation(np.array([30.0, 40.0 + i]), 2))
        data.frames = {0: fa, 1: fb}
        data.matches[(0, 1)] = RawMatches(0, 1, [(0, 0), (1, 1), (2, 2)])
        path = tmp_path / "c.txt"
        write_correspondences(data, path)
        back = read_correspondences(path)
        assert len(back.frames) == 2
        assert back.matches[(0, 1)].pairs == [(0, 0), (1, 1), (2, 2)]
        assert np.allclose(back.frames[0].observations[1].pixel, [11.5, 20.25])

    def test_pair_before_frames_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("rigsfm-correspondences 1\npair 0 1\n")
        with pytest.raises(Exception):
            read_correspondences(path)

    def test_parse_error_carries_line_number(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("rigsfm-correspondences 1\nframe 0 0 0 640 480\nobs not_a_number 2 0\n")
        with pytest.raises(ParseError) as exc:
            read_correspondences(path)
        assert exc.value.line_no == 3

    def test_bad_header(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("something else\n")
        with pytest.raises(ParseError) as exc:
            read_correspondences(path)
        assert exc.value.line_no == 1

    def test_out_of_bounds_observation_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("rigsfm-correspondences 1\nframe 0 0 0 640 480\nobs 640.0 10.0 0\n")
        with pytest.raises(ParseError):
            read_correspondences(path)


class TestPriorsAndRig:
    def test_priors_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        priors = {i: (0.1 * i, Pose(random_quat(rng), rng.uniform(-5, 5, 3)))
                  for i in range(5)}
        path = tmp_path / "p.txt"
        write_priors(priors, path)
        back = read_priors(path)
        for i in range(5):
            assert back[i][0] == priors[i][0]
            assert rotation_geodesic(back[i][1].q, priors[i][1].q) < 1e-12
            assert np.array_equal(back[i][1].t, priors[i][1].t)

    def test_rig_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        rig = [RigCamera(c, CameraIntrinsics(420.0, 421.0, 320.0, 240.0, -0.01, 0.002),
                         RelativePose(random_quat(rng), rng.uniform(-1, 1, 3)), 640, 480)
               for c in range(3)]
        path = tmp_path / "rig.txt"
        write_rig(rig, path)
        back = read_rig(path)
        assert [c.camera_id for c in back] == [0, 1, 2]
        for a, b in zip(rig, back):
            assert np.array_equal(a.intrinsics.as_array(), b.intrinsics.as_array())
            assert np.array_equal(a.relative.t, b.relative.t)

    def test_principal_point_out_of_bounds(self, tmp_path):
        path = tmp_path / "rig.txt"
        path.write_text("rigsfm-rig 1\ncamera 0 640 480 400 400 700 240 0 0 1 0 0 0 0 0 0\n")
        with pytest.raises(ParseError):
            read_rig(path)


class TestAnchorAndTrajectory:
    def test_anchor_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        anchor = SceneTransform(random_quat(rng), rng.uniform(-100, 100, 3))
        path = tmp_path / "a.txt"
        write_anchor(anchor, path)
        back = read_anchor(path)
        assert rotation_geodesic(anchor.q, back.q) < 1e-12
        assert np.array_equal(anchor.t, back.t)

    def test_trajectory_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        entries = [(0.1 * i, Pose(random_quat(rng), rng.uniform(-50, 50, 3)))
                   for i in range(7)]
        path = tmp_path / "t.txt"
        write_trajectory(entries, path)
        back = read_trajectory(path)
        assert len(back) == 7
        for (ts0, p0), (ts1, p1) in zip(sorted(entries), back):
            assert ts0 == ts1
            assert rotation_geodesic(p0.q, p1.q) < 1e-12
            assert np.array_equal(p0.t, p1.t)


class TestPly:
    def test_empty_cloud(self, tmp_path):
        path = tmp_path / "empty.ply"
        write_ply(np.zeros((0, 3)), np.zeros((0, 3)), path)
        pts, cols = read_ply(path)
        assert pts.shape == (0, 3)
        assert b"element vertex 0" in path.read_bytes()

    def test_roundtrip_float_precision(self, tmp_path):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-100, 100, (50, 3)).astype(np.float32).astype(float)
        cols = rng.integers(0, 256, (50, 3)).astype(np.uint8)
        path = tmp_path / "c.ply"
        write_ply(pts, cols, path)
        back_pts, back_cols = read_ply(path)
        assert np.array_equal(back_pts.astype(np.float32), pts.astype(np.float32))
        assert np.array_equal(back_cols, cols)

    def test_three_point_byte_layout(self, tmp_path):
        # byte-for-byte contract of the documented grammar
        pts = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [-1.0, 0.5, 0.25]])
        cols = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)
        path = tmp_path / "three.ply"
        write_ply(pts, cols, path)
        blob = path.read_bytes()
        header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
                  b"end_header\n")
        assert blob.startswith(header)
        body = blob[len(header):]
        assert len(body) == 3 * (12 + 3)
        row0 = np.frombuffer(body[:12], dtype="<f4")
        assert np.allclose(row0, [1.0, 2.0, 3.0])
        assert body[12:15] == bytes([255, 0, 0])


class TestLabelsAndConfig:
    def test_labels_roundtrip(self, tmp_path):
        table = LabelTable({0: "road", 1: "building", 7: "rider"})
        path = tmp_path / "labels.txt"
        write_labels(table, path)
        back = read_labels(path)
        assert back.names == table.names
        assert back.id_of("rider") == 7
        assert back.name_of(99) == "unknown"
        assert back.dynamic_ids(["rider", "vehicle"]) == {7}

    def test_config_roundtrip(self, tmp_path):
        config = PipelineConfig(seed=42, overlap_threshold=0.2,
                                dynamic_classes=("vehicle",),
                                use_camera_set_registration=False)
        path = tmp_path / "cfg.txt"
        save_config(config, path)
        back = load_config(path)
        assert back == config

    def test_config_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("rigsfm-config 1\nnot_a_key = 3\n")
        with pytest.raises(ParseError):
            load_config(path)

    def test_config_holds_every_named_default(self):
        # thresholds named by the interface contract all live in the config
        config = PipelineConfig()
        assert config.overlap_threshold == 0.15
        assert config.verify_sampson_threshold == 4e-3
        assert config.verify_min_inliers == 15
        assert config.init_min_baseline_m == 1.0
        assert config.init_min_correspondences == 100
        assert config.init_min_points == 50
        assert config.pnp_threshold_px == 4.0
        assert config.pnp_min_inliers == 12
        assert config.register_min_visible == 15
        assert config.register_retry_budget == 3
        assert config.fuse_rotation_scale_deg == 2.0
        assert config.fuse_translation_scale_m == 0.5
        assert config.tri_min_angle_deg == 1.5
        assert config.tri_max_error_px == 4.0
        assert config.plane_inlier_threshold_m == 0.15
        assert config.plane_lo_iterations == 10
        assert config.road_window_units == 5
        assert config.road_min_points == 30
        assert config.ba_cauchy_scale_px == 1.0
        assert config.ba_local_min_shared == 20
        assert config.ba_global_ratio == 0.1
        assert config.ba_global_cap == 25
        assert config.lm_max_iterations == 50
        assert config.lm_rel_decrease_tol == 1e-8
        assert config.lm_gradient_tol == 1e-10
        assert config.agg_num_candidates == 3
        assert config.dynamic_classes == ("vehicle", "pedestrian", "rider")
