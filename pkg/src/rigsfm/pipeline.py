"""Incremental reconstruction driver.

Order of operations per scene: select image pairs by prior frustum overlap,
filter matches semantically, verify geometrically, merge tracks, register
the prior-initialized seed pair, then iterate next-best-unit registration,
triangulation, road-plane filtering, and local/global camera-set BA until no
viable unit remains.  A final global pass and outlier sweep close the run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ba import (
    RobustLoss,
    build_global_csba,
    build_local_csba,
    build_traditional_ba,
    choose_ba_scope,
    filter_after_ba,
)
from .config import PipelineConfig
from .errors import ReconstructionFailure
from .ingest import SceneInputs, filter_semantic, load_inputs, select_pairs, verify_pair
from .model import Reconstruction, RigidUnit
from .register import (
    fuse_unit_rotation,
    fuse_unit_translation,
    initialize_model,
    next_best_unit,
    register_unit,
    select_initial_units,
    triangulate_new_tracks,
    unit_pose_vote,
)
from .solver import LMConfig, SolveReport, solve
from .triangulate import filter_road_points

logger = logging.getLogger(__name__)

__all__ = ["PipelineResult", "build_graph", "reconstruct_scene", "reconstruct_project"]


@dataclass
class PipelineResult:
    reconstruction: Reconstruction
    solve_reports: list[SolveReport] = field(default_factory=list)
    skipped_units: list[int] = field(default_factory=list)
    registration_order: list[int] = field(default_factory=list)

    @property
    def final_report(self) -> Optional[SolveReport]:
        return self.solve_reports[-1] if self.solve_reports else None


def lm_config(config: PipelineConfig) -> LMConfig:
    return LMConfig(
        max_iterations=config.lm_max_iterations,
        rel_decrease_tol=config.lm_rel_decrease_tol,
        gradient_tol=config.lm_gradient_tol,
        init_lambda=config.lm_init_lambda,
    )


def build_graph(inputs: SceneInputs, config: PipelineConfig) -> None:
    """Select, filter, verify, and merge the raw matches into tracks (in place)."""
    allowed = set(select_pairs(inputs.frames, inputs.priors, inputs.rig, config))
    kept = {}
    cams = {c.camera_id: c for c in inputs.rig}
    for key in sorted(inputs.graph.pairs):
        if key not in allowed:
            continue
        pair = inputs.graph.pairs[key]
        pair = filter_semantic(pair, inputs.frames, inputs.labels,
                               config.dynamic_classes)
        pair = verify_pair(
            pair, inputs.frames,
            cams[inputs.frames[key[0]].camera_id].intrinsics,
            cams[inputs.frames[key[1]].camera_id].intrinsics,
            config)
        kept[key] = pair
        if pair.verified:
            inputs.graph.merge_tracks_from(pair)
    inputs.graph.pairs = kept
    n_ver = sum(1 for p in kept.values() if p.verified)
    logger.info("graph: %d/%d pairs verified (%d selected by overlap)",
                n_ver, len(kept), len(allowed))


def _make_reconstruction(inputs: SceneInputs) -> Reconstruction:
    recon = Reconstruction(inputs.rig)
    for uid in sorted(inputs.priors):
        ts, _ = inputs.priors[uid]
        recon.add_unit(RigidUnit(uid, ts))
    for fid in sorted(inputs.frames):
        recon.add_frame(inputs.frames[fid])
    return recon


def _gauge_snap(recon: Reconstruction, priors, input_rig, config: PipelineConfig) -> None:
    """Re-anchor the vehicle frame along the exact gauge family.

    Recomposing every relative pose against the opposite motion of every
    unit changes no residual, so the data cannot choose the vehicle frame;
    the absolute anchors are the prior trajectory and the input calibration.
    Each contributes a vote for the common frame offset (rotation,
    translation, and scale), fused inversely to its observed consistency, so
    an exactly self-consistent anchor dominates a noisy one.
    """
    from .geometry import (Pose, RelativePose, quat_conjugate, quat_multiply,
                           quat_to_rotvec, quat_from_rotvec, quats_to_matrices,
                           quat_rotate)

    units = [u for u in recon.registered_units() if u.pose is not None]
    if len(units) < 2 or not input_rig:
        return
    input_by_id = {cid: (q, t) for cid, q, t in input_rig}
    var_floor = 1e-10

    def fused(vote_a, cov_a, vote_b, cov_b):
        """Per-direction inverse-covariance fusion of two 3-vector votes."""
        Ia = np.linalg.inv(cov_a + var_floor * np.eye(3))
        Ib = np.linalg.inv(cov_b + var_floor * np.eye(3))
        return np.linalg.solve(Ia + Ib, Ia @ vote_a + Ib @ vote_b)

    def apply_gauge(G: Pose) -> None:
        Gi = G.inverse()
        for cam in recon.rig:
            p = cam.relative.as_pose().compose(G)
            cam.relative = RelativePose(p.q, p.t)
        for u in recon.units.values():
            if u.pose is not None:
                u.pose = Gi.compose(u.pose)

    def prior_gauge_fit():
        """Joint LSQ of (rig twist, rig shift, world motion) against priors.

        Unit rotations alone cannot separate a rig yaw from a world yaw on a
        yaw-dominant trajectory, but unit origins can: a world rotation
        sweeps them around (lever arm) while a rig twist leaves them alone.
        Returns (omega_g, v_g, var_rot, var_trans).
        """
        from .reproj import skew

        n = len(units)
        origins = np.stack([u.pose.t for u in units])
        centroid = origins.mean(axis=0)
        lever = max(float(np.sqrt(np.mean(np.sum((origins - centroid) ** 2, axis=1)))), 1.0)
        A = np.zeros((6 * n, 12))
        b = np.zeros(6 * n)
        for i, u in enumerate(units):
            Ru = u.pose.rotation
            q_prior = priors[u.unit_id][1].q
            t_prior = priors[u.unit_id][1].t
            drot = quat_to_rotvec(quat_multiply(q_prior, quat_conjugate(u.pose.q)))
            r0, r1 = 6 * i, 6 * i + 3
            A[r0:r1, 0:3] = -np.eye(3) * lever
            A[r0:r1, 6:9] = -Ru * lever
            b[r0:r1] = drot * lever
            A[r1:r1 + 3, 3:6] = -Ru.T
            A[r1:r1 + 3, 6:9] = -skew(u.pose.t - centroid)
            A[r1:r1 + 3, 9:12] = np.eye(3)
            b[r1:r1 + 3] = t_prior - u.pose.t
        sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        resid = b - A @ sol
        sigma2 = float(np.mean(resid ** 2)) + var_floor
        cov = sigma2 * np.linalg.pinv(A.T @ A)
        cov_rot = cov[0:3, 0:3].copy()
        cov_tr = cov[3:6, 3:6].copy()
        if rank < 12:
            # the trajectory shape cannot separate a rig-frame change from a
            # world motion (e.g. a circular arc); trust the calibration anchor
            cov_rot += 1e6 * np.eye(3)
            cov_tr += 1e6 * np.eye(3)
        return sol[0:3], sol[3:6], cov_rot, cov_tr

    # --- rotation ---
    calib_rot = []
    for cam in recon.rig:
        if cam.camera_id not in input_by_id:
            continue
        qi, _ = input_by_id[cam.camera_id]
        calib_rot.append(quat_to_rotvec(quat_multiply(quat_conjugate(cam.relative.q), qi)))
    # --- rotation only: the rotation gauge coordinate is what drifts during
    # incremental growth (measured), while the translation coordinate stays
    # where the solve's null-space projection pinned it; a translation snap
    # would re-estimate it from strictly weaker information
    calib_rot = np.stack(calib_rot)
    rot_c = calib_rot.mean(axis=0)
    var_c = float(np.mean(np.sum((calib_rot - rot_c) ** 2, axis=1))) / (3 * len(calib_rot))
    rot_p, _, cov_p, _ = prior_gauge_fit()
    omega = fused(rot_c, var_c * np.eye(3), rot_p, cov_p)
    apply_gauge(Pose(quat_from_rotvec(omega), np.zeros(3)))

    # --- scale (only meaningful while relative translations float) ---
    rig_norms = []
    for cam in recon.rig:
        if cam.camera_id not in input_by_id:
            continue
        qi, ti = input_by_id[cam.camera_id]
        n_in, n_now = float(np.linalg.norm(ti)), float(np.linalg.norm(cam.relative.t))
        if n_in > 0.05 and n_now > 1e-9:
            rig_norms.append(n_in / n_now)
    if rig_norms:
        s_c = float(np.mean(rig_norms))
        var_sc = float(np.var(rig_norms)) / len(rig_norms)
        from .evaluate import align_umeyama
        est = np.stack([u.pose.t for u in units])
        ref = np.stack([priors[u.unit_id][1].t for u in units])
        T = align_umeyama(est, ref, with_scale=True)
        s_p = T.scale
        fit = np.stack([T.apply_points(e) for e in est])
        sigma2 = float(np.mean(np.sum((fit - ref) ** 2, axis=1)))
        spread2 = float(np.sum((est - est.mean(axis=0)) ** 2))
        var_sp = sigma2 / max(spread2, 1e-9)
        wc = 1.0 / max(var_sc, var_floor)
        wp = 1.0 / max(var_sp, var_floor)
        s = (wc * s_c + wp * s_p) / (wc + wp)
        if abs(s - 1.0) > 1e-12:
            for u in recon.units.values():
                if u.pose is not None:
                    u.pose = Pose(u.pose.q, s * u.pose.t)
            for point in recon.points.values():
                point.position = s * point.position
            for cam in recon.rig:
                cam.relative = RelativePose(cam.relative.q, s * cam.relative.t)


def _anchor_to_priors(recon: Reconstruction, priors, config: PipelineConfig) -> None:
    """Re-express the model so registered unit poses best match the priors.

    The model's shape and scale come from the rig and the image geometry;
    the priors supply the only absolute placement.  The alignment rotation
    is estimated from the unit ROTATIONS (origins alone cannot observe roll
    on a near-straight trajectory), then translation and optional scale from
    the origins with that rotation held.
    """
    if config.final_prior_alignment == "none":
        return
    from .geometry import SceneTransform, quat_conjugate, quat_multiply, quat_rotate
    from .register import fuse_unit_rotation

    units = [u for u in recon.registered_units() if u.pose is not None]
    if len(units) < 2:
        return
    # apply_pose maps q_est to q_est * conj(q_T), so the per-unit vote for
    # q_T is conj(q_prior) * q_est; near-quadratic average (prior noise is
    # not outlier-contaminated)
    votes = [quat_multiply(quat_conjugate(priors[u.unit_id][1].q), u.pose.q)
             for u in units]
    q_W = fuse_unit_rotation(votes, scale_deg=180.0)

    est = np.stack([u.pose.t for u in units])
    ref = np.stack([priors[u.unit_id][1].t for u in units])
    rotated = quat_rotate(q_W, est)
    mu_r, mu_f = rotated.mean(axis=0), ref.mean(axis=0)
    if config.final_prior_alignment == "sim3":
        num = float(np.sum((ref - mu_f) * (rotated - mu_r)))
        den = float(np.sum((rotated - mu_r) ** 2))
        scale = num / max(den, 1e-12)
    else:
        scale = 1.0
    t_W = mu_f - scale * mu_r
    T = SceneTransform(q_W, t_W, scale)
    for u in recon.units.values():
        if u.pose is not None:
            u.pose = T.apply_pose(u.pose)
    for frame in recon.frames.values():
        if frame.pose_override is not None:
            frame.pose_override = T.apply_pose(frame.pose_override)
    for point in recon.points.values():
        point.position = T.apply_points(point.position)
    if T.scale != 1.0:
        from .geometry import RelativePose
        for cam in recon.rig:
            cam.relative = RelativePose(cam.relative.q, cam.relative.t * T.scale)


def _refresh_ablation_unit_poses(recon: Reconstruction, config: PipelineConfig) -> None:
    """Without camera-set registration, summarize frame poses per unit."""
    for unit in recon.registered_units():
        votes = []
        for fid in unit.frame_ids:
            frame = recon.frames[fid]
            if frame.registered and frame.pose_override is not None:
                votes.append(unit_pose_vote(
                    frame.pose_override, recon.camera(frame.camera_id).relative))
        if votes:
            q = fuse_unit_rotation([v.q for v in votes],
                                   config.fuse_rotation_scale_deg)
            t = fuse_unit_translation([v.t for v in votes],
                                      config.fuse_translation_scale_m)
            from .geometry import Pose
            unit.pose = Pose(q, t)


def reconstruct_scene(inputs: SceneInputs, config: PipelineConfig,
                      trace_file=None) -> PipelineResult:
    """Run the full incremental pipeline on loaded inputs.

    Raises ReconstructionFailure (or InitializationFailure, a subclass
    concern of the caller) when no model can be produced.
    """
    build_graph(inputs, config)
    index = inputs.graph.build_index()
    logger.info("graph holds %d tracks", len(index.tracks))

    recon = _make_reconstruction(inputs)
    # snapshot of the vehicle-frame datum before BA touches the rig
    input_rig = [(cam.camera_id, cam.relative.q.copy(), cam.relative.t.copy())
                 for cam in inputs.rig]
    loss = RobustLoss(config.ba_loss, config.ba_cauchy_scale_px)
    result = PipelineResult(recon)

    init_pair = select_initial_units(inputs.graph, inputs.frames, inputs.priors, config)
    initialize_model(init_pair, recon, index, inputs.priors, config)
    result.registration_order.extend(init_pair)

    retries: dict[int, int] = {}
    exhausted: set[int] = set()
    deferred_wait: set[int] = set()
    since_global = 0
    road_round = 0

    def rig_ready() -> bool:
        return len(recon.registered_units()) >= config.ba_min_units_for_rig

    def run_ba(seed_units: list[int]) -> None:
        nonlocal since_global
        if not config.use_camera_set_registration:
            problem = build_traditional_ba(recon, loss)
        else:
            scope = choose_ba_scope(since_global, len(recon.registered_units()),
                                    config.ba_global_ratio, config.ba_global_cap)
            if scope == "global":
                problem = build_global_csba(recon, loss, free_rig=rig_ready())
                since_global = 0
            else:
                problem = build_local_csba(recon, seed_units, loss,
                                           config.ba_local_min_shared)
        report = solve(problem, lm_config(config), trace_file=trace_file)
        problem.update_reconstruction(recon)
        result.solve_reports.append(report)
        if not config.use_camera_set_registration:
            _refresh_ablation_unit_poses(recon, config)
        filter_after_ba(recon, config.tri_max_error_px, config.tri_min_angle_deg)

    def run_road_filter() -> None:
        nonlocal road_round
        if not config.enable_road_filter:
            return
        try:
            road_id = inputs.labels.id_of(config.road_label)
        except KeyError:
            return
        window = result.registration_order[-config.road_window_units:]
        rng = np.random.default_rng(
            np.random.SeedSequence((config.derived_seed(road_round), 0xF11)))
        road_round += 1
        filter_road_points(recon, road_id, window,
                           config.plane_inlier_threshold_m,
                           config.road_min_points, rng,
                           config.plane_ransac_iterations,
                           config.plane_lo_iterations)

    run_road_filter()
    while True:
        candidate = next_best_unit(recon, index, config,
                                   exclude=exhausted | deferred_wait)
        if candidate is None:
            if deferred_wait:
                deferred_wait.clear()
                continue
            break
        uid = candidate.unit_id
        outcome = register_unit(uid, recon, index, config)
        if outcome == "deferred":
            retries[uid] = retries.get(uid, 0) + 1
            if retries[uid] >= config.register_retry_budget:
                logger.warning("unit %d skipped after %d failed attempts",
                               uid, retries[uid])
                exhausted.add(uid)
                result.skipped_units.append(uid)
            else:
                deferred_wait.add(uid)
            continue
        deferred_wait.clear()
        since_global += 1
        result.registration_order.append(uid)
        triangulate_new_tracks(recon, index, config,
                               touched_frames=set(recon.units[uid].frame_ids))
        run_road_filter()
        run_ba([uid])

    if recon.registered_units():
        if config.use_camera_set_registration:
            problem = build_global_csba(recon, loss, free_rig=rig_ready())
            report = solve(problem, lm_config(config), trace_file=trace_file)
            problem.update_reconstruction(recon)
            result.solve_reports.append(report)
        else:
            problem = build_traditional_ba(recon, loss)
            report = solve(problem, lm_config(config), trace_file=trace_file)
            problem.update_reconstruction(recon)
            result.solve_reports.append(report)
            _refresh_ablation_unit_poses(recon, config)
        filter_after_ba(recon, config.tri_max_error_px, config.tri_min_angle_deg)
    if config.use_camera_set_registration:
        _gauge_snap(recon, inputs.priors, input_rig, config)
    _anchor_to_priors(recon, inputs.priors, config)
    n_reg = len(recon.registered_units())
    if n_reg < 2:
        raise ReconstructionFailure(f"only {n_reg} units registered")
    logger.info("reconstruction: %d units, %d points, %d skipped",
                n_reg, len(recon.points), len(result.skipped_units))
    return result


def reconstruct_project(project_dir: str | Path,
                        config: Optional[PipelineConfig] = None,
                        trace_file=None) -> tuple[PipelineResult, SceneInputs]:
    """Load the scene files from a project directory and reconstruct."""
    project = Path(project_dir)
    inputs = load_inputs(
        project / "correspondences.txt",
        project / "priors.txt",
        project / "rig.txt",
        project / "labels.txt",
    )
    config = config or PipelineConfig()
    return reconstruct_scene(inputs, config, trace_file=trace_file), inputs
