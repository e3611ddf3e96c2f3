import copy
import math

import numpy as np
import pytest

from conftest import truth_reconstruction
from rigsfm.ba import (
    BAProblem,
    RobustLoss,
    build_global_csba,
    build_local_csba,
    build_traditional_ba,
    choose_ba_scope,
    filter_after_ba,
)
from rigsfm.config import PipelineConfig
from rigsfm.geometry import (
    CameraIntrinsics,
    Pose,
    RelativePose,
    camera_from_unit,
    project,
    quat_from_rotvec,
    quat_multiply,
    random_quat,
    relative_of,
    rotation_geodesic,
)
from rigsfm.model import Frame, Observation, Reconstruction, RigCamera, RigidUnit, ScenePoint
from rigsfm.solver import LMConfig, SolveReport, solve
from rigsfm.synthetic import SynthConfig, generate_scene


class TestRobustLoss:
    def test_cauchy_properties(self):
        loss = RobustLoss("cauchy", 2.0)
        s = np.linspace(0, 50, 200)
        rho = loss.rho(s)
        assert rho[0] == 0.0
        assert np.all(np.diff(rho) >= 0)          # monotone non-decreasing
        assert np.all(rho <= s + 1e-12)           # rho(s) <= s
        tiny = np.array([1e-8])
        assert loss.rho(tiny)[0] == pytest.approx(1e-8, rel=1e-4)  # rho'(0)=1

    def test_quadratic(self):
        loss = RobustLoss("quadratic", 1.0)
        s = np.array([0.0, 2.0, 9.0])
        assert np.array_equal(loss.rho(s), s)
        assert np.array_equal(loss.weight(s), np.ones(3))

    def test_invalid(self):
        with pytest.raises(ValueError):
            RobustLoss("huber", 1.0)
        with pytest.raises(ValueError):
            RobustLoss("cauchy", 0.0)


def _chain_reconstruction(n_units=4, shared=25):
    """Chain of units where only adjacent units share tracks."""
    K = CameraIntrinsics(400, 400, 320, 240)
    recon = Reconstruction([RigCamera(0, K, RelativePose.identity(), 640, 480)])
    for u in range(1, n_units + 1):
        pose = Pose(t=np.array([2.0 * u, 0.0, 0.0]))
        recon.add_unit(RigidUnit(u, 0.1 * u, pose, [], True))
        recon.add_frame(Frame(u, 0, u, 640, 480, registered=True))
    rng = np.random.default_rng(0)
    for u in range(1, n_units):
        for _ in range(shared):
            X = np.array([2.0 * u + 1.0 + rng.uniform(-0.5, 0.5),
                          rng.uniform(-2, 2), rng.uniform(5, 9)])
            track = []
            for fid in (u, u + 1):
                uv = project(K, recon.frame_pose(fid), X)
                if uv is None:
                    continue
                frame = recon.frames[fid]
                frame.observations.append(Observation(uv, 0))
                track.append((fid, len(frame.observations) - 1))
            if len(track) == 2:
                recon.add_point(ScenePoint(X, 0, track, 0.0))
    return recon


class TestProblemCounts:
    def test_local_single_seed_no_neighbors(self):
        recon = _chain_reconstruction(4, shared=3)  # below min_shared=20
        problem = build_local_csba(recon, [3], min_shared=20)
        assert problem.num_free_pose_blocks == 1
        assert int(problem.unit_free.sum()) == 1
        assert not problem.rel_free.any()
        assert not problem.intr_free.any()

    def test_local_chain_connectivity_fixture(self):
        """Adjacent-only sharing, seed unit 3 -> free exactly {2, 3, 4}."""
        recon = _chain_reconstruction(4, shared=25)
        problem = build_local_csba(recon, [3], min_shared=20)
        free_ids = {uid for uid, free in zip(problem.unit_ids, problem.unit_free) if free}
        assert free_ids == {2, 3, 4}
        assert problem.num_free_pose_blocks == 3

    def test_local_free_count_never_k_times_n(self):
        cfg = SynthConfig(num_units=10, num_cameras=6, points_road=120,
                          points_building=120, points_vegetation=60,
                          points_vehicle=0, seed=11, heading_rate_deg=3.0)
        recon = truth_reconstruction(generate_scene(cfg))
        problem = build_local_csba(recon, [sorted(recon.units)[5]])
        # free pose blocks = free units only (k relative poses all fixed)
        assert problem.num_free_pose_blocks == int(problem.unit_free.sum())
        assert problem.num_free_pose_blocks <= 10
        assert not problem.rel_free.any()

    def test_global_counts_k6_n100(self):
        """k=6, n=100: 106 pose blocks, 105 free; per-image baseline: 600."""
        cfg = SynthConfig(num_units=100, num_cameras=6, points_road=60,
                          points_building=60, points_vegetation=30,
                          points_vehicle=0, seed=12, heading_rate_deg=2.0)
        recon = truth_reconstruction(generate_scene(cfg))
        problem = build_global_csba(recon)
        assert problem.num_pose_blocks == 106
        assert problem.num_free_pose_blocks == 105
        baseline = build_traditional_ba(recon)
        assert baseline.num_pose_blocks == 600
        assert baseline.num_free_pose_blocks == 600

    def test_global_single_unit_boundary(self):
        recon = _chain_reconstruction(1, shared=0)
        # give the single unit a handful of points so the problem is valid
        problem = build_global_csba(recon)
        assert int(problem.unit_free.sum()) == 0   # the only unit is frozen
        assert problem.rel_free.all()              # k relative poses free
        assert problem.num_pose_blocks == 1 + 1


class TestJacobians:
    def _fd_max_rel_error(self, problem, n_cols=None):
        problem._build_offsets()
        n_cam = problem.num_free_camera_dofs
        n_pts = problem.num_points
        e0, blocks, J_point = problem.evaluate()
        m = len(e0)
        J = np.zeros((2 * m, n_cam + 3 * n_pts))
        for blk in blocks:
            for o in range(m):
                if blk.col[o] >= 0:
                    J[2 * o:2 * o + 2, blk.col[o]:blk.col[o] + blk.dim] += blk.jac[o]
        for o in range(m):
            p = problem.obs_point[o]
            J[2 * o:2 * o + 2, n_cam + 3 * p:n_cam + 3 * p + 3] += J_point[o]
        h = 1e-6
        cols = range(n_cam + 3 * n_pts)
        if n_cols is not None:
            rng = np.random.default_rng(0)
            cols = rng.choice(n_cam + 3 * n_pts, size=min(n_cols, n_cam + 3 * n_pts),
                              replace=False)
        worst = 0.0
        for col in cols:
            dc = np.zeros(n_cam)
            dp = np.zeros((n_pts, 3))
            if col < n_cam:
                dc[col] = h
            else:
                p, axis = divmod(col - n_cam, 3)
                dp[p, axis] = h
            snap = problem.snapshot()
            problem.apply_step(dc, dp)
            ep, _ = problem.residuals()
            problem.restore(snap)
            problem.apply_step(-dc, -dp)
            em, _ = problem.residuals()
            problem.restore(snap)
            fd = (ep - em).ravel() / (2 * h)
            ana = J[:, col]
            denom = max(np.abs(fd).max(), np.abs(ana).max(), 1e-6)
            worst = max(worst, float(np.abs(fd - ana).max() / denom))
        return worst

    def test_analytic_jacobians_match_finite_differences(self, small_scene):
        """100 random parameter columns across all three problem modes."""
        recon = truth_reconstruction(small_scene)
        # perturb so Jacobians are evaluated away from a residual zero
        rng = np.random.default_rng(1)
        for u in recon.units.values():
            u.pose = Pose(quat_multiply(quat_from_rotvec(rng.normal(0, 0.01, 3)), u.pose.q),
                          u.pose.t + rng.normal(0, 0.05, 3))
        g = build_global_csba(recon)
        t = build_traditional_ba(recon, free_intrinsics=True)
        assert self._fd_max_rel_error(g, n_cols=40) <= 1e-5
        assert self._fd_max_rel_error(t, n_cols=40) <= 1e-5
        lo = build_local_csba(recon, [sorted(recon.units)[3]], min_shared=5)
        assert self._fd_max_rel_error(lo, n_cols=20) <= 1e-5

    def test_gauge_generators_are_null_directions(self, small_scene):
        recon = truth_reconstruction(small_scene)
        for builder in (lambda: build_global_csba(recon),
                        lambda: build_traditional_ba(recon)):
            p = builder()
            N = p.gauge_generators()
            assert N.shape[1] == 7
            c0 = p.cost()
            for j in range(N.shape[1]):
                eps = 1e-6
                snap = p.snapshot()
                p.apply_step(eps * N[:p.num_free_camera_dofs, j],
                             eps * N[p.num_free_camera_dofs:, j].reshape(-1, 3))
                assert abs(p.cost() - c0) <= 1e-8 * max(c0, 1.0) + 1e-12
                p.restore(snap)


class TestSolve:
    def test_zero_residual_start_terminates_immediately(self, small_scene):
        recon = truth_reconstruction(small_scene)
        problem = build_global_csba(recon)
        report = solve(problem, LMConfig())
        assert report.termination == "zero_cost"
        assert report.iterations == 0
        assert report.final_cost < 1e-12

    def test_quadratic_toy_problem(self):
        """One perturbed point, two fixed cameras: converge to the optimum."""
        K = CameraIntrinsics(400, 400, 320, 240)
        recon = Reconstruction([RigCamera(0, K, RelativePose.identity(), 640, 480),
                                RigCamera(1, K, RelativePose(t=np.array([1.0, 0, 0])), 640, 480)])
        recon.add_unit(RigidUnit(0, 0.0, Pose(), [], True))
        recon.add_frame(Frame(0, 0, 0, 640, 480, registered=True))
        recon.add_frame(Frame(1, 1, 0, 640, 480, registered=True))
        X = np.array([0.4, -0.1, 5.0])
        track = []
        for fid in (0, 1):
            uv = project(K, recon.frame_pose(fid), X)
            recon.frames[fid].observations.append(Observation(uv, 0))
            track.append((fid, 0))
        recon.add_point(ScenePoint(X + np.array([0.2, -0.1, 0.4]), 0, track, 0.0))
        problem = build_local_csba(recon, [0], min_shared=1)
        # only the point should move: the single unit is the whole model
        problem.unit_free[:] = False
        problem._offsets_ready = False
        report = solve(problem, LMConfig())
        assert report.final_cost < 1e-20
        assert np.linalg.norm(problem.X[0] - X) < 1e-10

    def test_statistical_consistency_at_half_pixel_noise(self):
        """6-camera, 50-unit scene at sigma=0.5 px: RMS ~ sigma within 10%."""
        cfg = SynthConfig(num_units=50, num_cameras=6, points_road=250,
                          points_building=250, points_vegetation=120,
                          points_vehicle=0, seed=31, pixel_noise_px=0.5,
                          heading_rate_deg=2.0)
        scene = generate_scene(cfg)
        recon = truth_reconstruction(scene)
        problem = build_global_csba(recon, RobustLoss("cauchy", 1.0))
        report = solve(problem, LMConfig())
        assert abs(report.final_rms_px - 0.5) / 0.5 < 0.10

    def test_cost_trace_non_increasing(self, small_scene):
        recon = truth_reconstruction(small_scene)
        rng = np.random.default_rng(2)
        for pid in recon.points:
            recon.points[pid].position = recon.points[pid].position + rng.normal(0, 0.05, 3)
        problem = build_global_csba(recon)
        report = solve(problem, LMConfig())
        trace = report.cost_trace
        assert all(trace[i + 1] <= trace[i] + 1e-9 for i in range(len(trace) - 1))
        assert report.final_cost <= report.initial_cost

    def test_no_free_blocks_rejected(self, small_scene):
        recon = truth_reconstruction(small_scene)
        problem = build_global_csba(recon)
        problem.unit_free[:] = False
        problem.rel_free[:] = False
        problem.intr_free[:] = False
        problem.point_ids = []
        problem.X = np.zeros((0, 3))
        problem.obs_uv = np.zeros((0, 2))
        problem.obs_point = np.zeros(0, dtype=int)
        problem.obs_cam = np.zeros(0, dtype=int)
        problem.obs_unit = np.zeros(0, dtype=int)
        problem._offsets_ready = False
        with pytest.raises(ValueError):
            solve(problem, LMConfig())

    def test_non_finite_start_rejected(self, small_scene):
        recon = truth_reconstruction(small_scene)
        problem = build_global_csba(recon)
        problem.X[0] = np.array([np.nan, 0.0, 0.0])
        with pytest.raises(ValueError):
            solve(problem, LMConfig())

    def test_solver_trace_log_format(self, small_scene, tmp_path):
        import io

        recon = truth_reconstruction(small_scene)
        rng = np.random.default_rng(3)
        for pid in recon.points:
            recon.points[pid].position = recon.points[pid].position + rng.normal(0, 0.02, 3)
        problem = build_global_csba(recon)
        buf = io.StringIO()
        solve(problem, LMConfig(), trace_file=buf)
        lines = buf.getvalue().strip().splitlines()
        assert len(lines) >= 1
        for line in lines:
            it, cost, damping, step = line.split()
            int(it), float(cost), float(damping), float(step)


class TestRigidityInvariant:
    def test_relative_poses_constant_across_units_after_csba(self, small_scene):
        recon = truth_reconstruction(small_scene)
        rng = np.random.default_rng(4)
        for u in recon.units.values():
            u.pose = Pose(u.pose.q, u.pose.t + rng.normal(0, 0.02, 3))
        problem = build_global_csba(recon)
        solve(problem, LMConfig())
        problem.update_reconstruction(recon)
        for cam in recon.rig:
            stored = cam.relative
            for unit in recon.registered_units():
                fid = next(f for f in unit.frame_ids
                           if recon.frames[f].camera_id == cam.camera_id)
                derived = relative_of(unit.pose, recon.frame_pose(fid))
                assert rotation_geodesic(derived.q, stored.q) < math.degrees(1e-11)
                assert np.linalg.norm(derived.t - stored.t) < 1e-11

    def test_traditional_poses_drift_from_rigidity(self, small_scene):
        """With per-image poses on noisy data, derived relative poses vary."""
        cfg = SynthConfig(num_units=8, num_cameras=4, points_road=160,
                          points_building=160, points_vegetation=80,
                          points_vehicle=20, seed=101, heading_rate_deg=4.0,
                          pixel_noise_px=0.8)
        scene = generate_scene(cfg)
        recon = truth_reconstruction(scene)
        problem = build_traditional_ba(recon)
        solve(problem, LMConfig(max_iterations=15))
        problem.update_reconstruction(recon)
        cam0 = recon.camera(0)
        rels = []
        for unit in recon.registered_units():
            fid = next(f for f in unit.frame_ids if recon.frames[f].camera_id == 0)
            assert recon.frames[fid].pose_override is not None
            rels.append(relative_of(unit.pose, recon.frame_pose(fid)))
        spreads = [rotation_geodesic(rels[0].q, r.q) for r in rels[1:]]
        assert max(spreads) > 1e-6  # not constant anymore

    def test_csba_and_traditional_agree_on_clean_data(self, small_scene):
        recon_a = truth_reconstruction(small_scene)
        recon_b = truth_reconstruction(small_scene)
        ra = solve(build_global_csba(recon_a), LMConfig())
        rb = solve(build_traditional_ba(recon_b), LMConfig())
        assert ra.final_cost < 1e-9
        assert rb.final_cost < 1e-9


class TestChooseScope:
    def test_zero_since_global_is_local(self):
        assert choose_ba_scope(0, 30) == "local"

    def test_ratio_triggers_global(self):
        assert choose_ba_scope(10, 50) == "global"

    def test_cap_triggers_global(self):
        assert choose_ba_scope(25, 1000) == "global"

    def test_enumeration_matches_formula(self):
        for since in range(0, 40):
            for total in range(1, 60):
                want = "global" if (since >= 25 or since / total >= 0.1) else "local"
                assert choose_ba_scope(since, total) == want


class TestFilterAfterBa:
    def test_all_below_threshold_unchanged(self, small_scene):
        recon = truth_reconstruction(small_scene)
        before_points = dict(recon.points)
        obs_removed, pts_removed = filter_after_ba(recon, 4.0, 1.5)
        assert obs_removed == 0
        assert pts_removed == 0
        assert set(recon.points) == set(before_points)

    def test_single_bad_observation_removed(self, small_scene):
        recon = truth_reconstruction(small_scene)
        pid = next(p for p in sorted(recon.points)
                   if len(recon.points[p].track) >= 3)
        fid, oi = recon.points[pid].track[0]
        recon.frames[fid].observations[oi].pixel = \
            recon.frames[fid].observations[oi].pixel + np.array([50.0, 0.0])
        obs_removed, pts_removed = filter_after_ba(recon, 4.0, 1.5)
        assert obs_removed == 1
        assert pid in recon.points
        assert (fid, oi) not in recon.points[pid].track
        assert recon.frames[fid].observations[oi].track_id is None

    def test_matches_bruteforce_scan(self, small_scene):
        rng = np.random.default_rng(5)
        recon = truth_reconstruction(small_scene)
        for pid in recon.points:
            recon.points[pid].position = recon.points[pid].position + rng.normal(0, 0.02, 3)

        # oracle: full scan with scalar projection
        expected_removed = set()
        for pid, point in recon.points.items():
            for fid, oi in point.track:
                frame = recon.frames[fid]
                uv = project(recon.camera(frame.camera_id).intrinsics,
                             recon.frame_pose(fid), point.position)
                err = np.inf if uv is None else float(
                    np.linalg.norm(uv - frame.observations[oi].pixel))
                if err > 4.0:
                    expected_removed.add((pid, fid, oi))
        recon2 = truth_reconstruction(small_scene)
        for pid in recon2.points:
            recon2.points[pid].position = recon.points[pid].position.copy()
        filter_after_ba(recon2, 4.0, 1.5)
        actually_removed = set()
        for pid, point in recon.points.items():
            kept = set(recon2.points[pid].track) if pid in recon2.points else set()
            for node in point.track:
                if node not in kept:
                    actually_removed.add((pid, *node))
        # points fully deleted contribute all their observations
        assert {(p, f, o) for p, f, o in expected_removed} <= actually_removed
        extra = actually_removed - expected_removed
        # extras only from points deleted by the track/angle rule
        for pid, fid, oi in extra:
            assert pid not in recon2.points
