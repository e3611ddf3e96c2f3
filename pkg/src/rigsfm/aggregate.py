"""Multi-scene aggregation: association, coarse assembly, and fine alignment.

Fragmented reconstructions share no images, so they are first placed in a
common frame through their GNSS anchors, then a single rigid transform from
the merge scene into the reference frame is initialized from one relocalized
frame and refined by transformation-based BA while reference poses stay
fixed.  Rigid units transfer through the transform as wholes, so the merge
scene's internal relative poses survive aggregation exactly.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ba import BAProblem, RobustLoss
from .config import PipelineConfig
from .errors import AggregationFailure
from .formats import LabelTable
from .geometry import Pose, SceneTransform, camera_from_unit
from .ingest import CorrespondenceGraph, MatchPair, TrackIndex, filter_semantic, verify_pair
from .model import Reconstruction, RigCamera
from .pnp import PnPResult
from .register import pnp_register, triangulate_new_tracks
from .solver import LMConfig, SolveReport, solve

logger = logging.getLogger(__name__)

__all__ = [
    "SceneBundle",
    "AssemblyState",
    "AggregationResult",
    "associate_scenes",
    "select_merge_scene",
    "coarse_assemble",
    "init_transform",
    "register_merge_unit",
    "transform_ba",
    "aggregate_all",
]

CrossMatches = dict[tuple[int, int], list[tuple[int, int]]]


@dataclass
class SceneBundle:
    """A finished reconstruction with its GNSS placement."""

    scene_id: int
    reconstruction: Reconstruction
    anchor: SceneTransform
    labels: LabelTable

    @property
    def trajectory_midpoint(self) -> np.ndarray:
        """Global position of the unit origin at the median timestamp.

        The median-timestamp unit (lower middle for even counts) stays well
        defined even on self-intersecting trajectories, unlike a centroid.
        """
        units = [u for u in self.reconstruction.units.values()
                 if u.registered and u.pose is not None]
        if not units:
            raise ValueError(f"scene {self.scene_id} has no registered units")
        units.sort(key=lambda u: u.timestamp)
        mid = units[(len(units) - 1) // 2]
        return self.anchor.apply_points(mid.pose.t)


@dataclass
class AssemblyState:
    """Mutable state of one reference-merge assembly round."""

    fused: Reconstruction
    merge_scene_id: int
    merge_unit_ids: list[int]
    coarse_units: dict[int, Pose]
    transform: SceneTransform
    index: TrackIndex
    cross_count_by_unit: dict[int, int]
    cross_count_by_frame: dict[int, int]
    registered: set[int] = field(default_factory=set)
    applied_scale: float = 1.0
    merge_camera_ids: list[int] = field(default_factory=list)


def associate_scenes(bundles: list[SceneBundle]) -> tuple[int, list[int]]:
    """Reference scene (closest to the geometric center) and its candidates.

    The reference minimizes the summed midpoint distance to all scenes; the
    candidates are the up-to-three nearest other scenes.  With one bundle the
    candidate list is empty, signalling nothing to aggregate.
    """
    if not bundles:
        raise ValueError("associate_scenes needs at least one bundle")
    if len(bundles) == 1:
        return bundles[0].scene_id, []
    mids = {b.scene_id: b.trajectory_midpoint for b in bundles}
    ids = sorted(mids)
    ref = min(ids, key=lambda i: (sum(float(np.linalg.norm(mids[i] - mids[j]))
                                      for j in ids), i))
    others = [i for i in ids if i != ref]
    others.sort(key=lambda i: (float(np.linalg.norm(mids[i] - mids[ref])), i))
    return ref, others[:3]


def _cross_frustum_positive(ref_bundle: SceneBundle, merge_bundle: SceneBundle,
                            pairs: CrossMatches, config: PipelineConfig) -> set[tuple[int, int]]:
    """Cross-scene frame pairs whose coarse-placed frustums overlap at all."""
    from .ingest import frustum_overlap_scores

    W = ref_bundle.anchor.inverse().compose(merge_bundle.anchor)
    frames = {}
    poses = {}
    rigs = {}
    for bundle, mapper in ((ref_bundle, None), (merge_bundle, W)):
        recon = bundle.reconstruction
        by_cam = {c.camera_id: c for c in recon.rig}
        for fid, frame in recon.frames.items():
            if not frame.registered:
                continue
            pose = recon.frame_pose(fid)
            if pose is None:
                continue
            frames[fid] = frame
            poses[fid] = pose if mapper is None else mapper.apply_pose(pose)
            rigs[fid] = by_cam[frame.camera_id]
    needed = {fid for key in pairs for fid in key}
    frames = {fid: f for fid, f in frames.items() if fid in needed}
    if not frames:
        return set()
    rig_list = []
    seen = set()
    remap = {}
    for fid in sorted(frames):
        cam = rigs[fid]
        key = id(cam)
        if key not in seen:
            seen.add(key)
            clone = RigCamera(len(rig_list), cam.intrinsics, cam.relative,
                              cam.width, cam.height)
            rig_list.append(clone)
            remap[key] = clone.camera_id
    shadow = {}
    for fid, f in frames.items():
        import dataclasses as _dc
        shadow[fid] = _dc.replace(f, camera_id=remap[id(rigs[fid])],
                                  observations=f.observations)
    scores = frustum_overlap_scores(shadow, poses, rig_list, config)
    return {key for key in pairs
            if key in scores and scores[key] > 0.0}


def cross_overlap_inliers(
    ref_bundle: SceneBundle,
    merge_bundle: SceneBundle,
    pairs: CrossMatches,
    config: PipelineConfig,
) -> dict[tuple[int, int], MatchPair]:
    """Semantic-filter and geometrically verify the cross-scene matches.

    Only pairs whose coarse frustum overlap is positive are considered; the
    returned map holds the verified MatchPairs keyed by (frame_a, frame_b).
    """
    all_frames = dict(ref_bundle.reconstruction.frames)
    all_frames.update(merge_bundle.reconstruction.frames)
    positive = _cross_frustum_positive(ref_bundle, merge_bundle, pairs, config)
    rig_of = {}
    for bundle in (ref_bundle, merge_bundle):
        by_cam = {c.camera_id: c for c in bundle.reconstruction.rig}
        for fid, f in bundle.reconstruction.frames.items():
            rig_of[fid] = by_cam[f.camera_id]
    verified: dict[tuple[int, int], MatchPair] = {}
    for key in sorted(positive):
        fa, fb = key
        pair = MatchPair(fa, fb, list(pairs[key]))
        pair = filter_semantic(pair, all_frames, ref_bundle.labels,
                               config.dynamic_classes)
        pair = verify_pair(pair, all_frames, rig_of[fa].intrinsics,
                           rig_of[fb].intrinsics, config)
        if pair.verified:
            verified[key] = pair
    return verified


def select_merge_scene(
    ref_bundle: SceneBundle,
    candidates: list[SceneBundle],
    cross: dict[tuple[int, int], CrossMatches],
    config: PipelineConfig,
) -> tuple[Optional[SceneBundle], dict[tuple[int, int], MatchPair]]:
    """Candidate with the highest verified cross-scene inlier count.

    Returns (None, {}) when every candidate has zero overlap; the caller
    treats that as an aggregation failure for the round.
    """
    best = None
    best_count = 0
    best_verified: dict[tuple[int, int], MatchPair] = {}
    for cand in candidates:
        key = (min(ref_bundle.scene_id, cand.scene_id),
               max(ref_bundle.scene_id, cand.scene_id))
        pairs = cross.get(key, {})
        if not pairs:
            continue
        verified = cross_overlap_inliers(ref_bundle, cand, pairs, config)
        count = sum(int(p.inlier_mask.sum()) for p in verified.values())
        if count > best_count:
            best, best_count, best_verified = cand, count, verified
    if best is not None:
        logger.info("merge scene %d selected with %d cross inliers",
                    best.scene_id, best_count)
    return best, best_verified


def coarse_assemble(ref_bundle: SceneBundle, merge_bundle: SceneBundle,
                    verified: dict[tuple[int, int], MatchPair]) -> AssemblyState:
    """Place both scenes in the reference frame and wire up fused tracks.

    The merge scene's poses are mapped through its anchor and the inverse of
    the reference anchor; the assembly transform starts at identity relative
    to this coarse placement.  The fused reconstruction initially contains
    the reference model plus the merge frames as unregistered entries.
    """
    if ref_bundle.anchor is None or merge_bundle.anchor is None:
        raise ValueError("both scenes need GNSS anchors for coarse assembly")
    W = ref_bundle.anchor.inverse().compose(merge_bundle.anchor)

    fused = copy.deepcopy(ref_bundle.reconstruction)
    merge_recon = merge_bundle.reconstruction
    cam_remap: dict[int, int] = {}
    merge_camera_ids = []
    for cam in merge_recon.rig:
        new_id = 1000 * (merge_bundle.scene_id + 1) + cam.camera_id
        cam_remap[cam.camera_id] = new_id
        clone = RigCamera(new_id, cam.intrinsics, cam.relative, cam.width, cam.height)
        fused.rig.append(clone)
        merge_camera_ids.append(new_id)
    fused.rig.sort(key=lambda c: c.camera_id)

    coarse_units: dict[int, Pose] = {}
    merge_unit_ids = []
    for uid in sorted(merge_recon.units):
        unit = merge_recon.units[uid]
        if not unit.registered or unit.pose is None:
            continue
        from .model import RigidUnit
        fused.add_unit(RigidUnit(uid, unit.timestamp, None, [], False))
        coarse_units[uid] = W.apply_pose(unit.pose)
        merge_unit_ids.append(uid)
    for fid in sorted(merge_recon.frames):
        frame = merge_recon.frames[fid]
        if frame.unit_id not in coarse_units:
            continue
        from .model import Frame, Observation
        clone = Frame(frame.frame_id, cam_remap[frame.camera_id], frame.unit_id,
                      frame.width, frame.height,
                      [Observation(o.pixel.copy(), o.semantic_label)
                       for o in frame.observations],
                      registered=False)
        fused.add_frame(clone)

    # fused track forest: existing tracks of both scenes plus the verified
    # cross matches, with the same one-observation-per-frame guard
    graph = CorrespondenceGraph()
    for pid in sorted(fused.points):
        track = fused.points[pid].track
        for node in track[1:]:
            graph.merge_nodes(track[0], node)
    for pid in sorted(merge_recon.points):
        track = merge_recon.points[pid].track
        keep = [n for n in track if n[0] in fused.frames]
        for node in keep[1:]:
            graph.merge_nodes(keep[0], node)
    for key in sorted(verified):
        graph.merge_tracks_from(verified[key])
    index = graph.build_index()
    for pid in sorted(fused.points):
        track = fused.points[pid].track
        if track:
            ti = index.track_of(*track[0])
            if ti is not None:
                index.point_of[ti] = pid

    cross_by_unit: dict[int, int] = {}
    cross_by_frame: dict[int, int] = {}
    merge_fids = set(fused.frames) - set(ref_bundle.reconstruction.frames)
    for key, pair in verified.items():
        n = int(pair.inlier_mask.sum())
        for fid in key:
            if fid in merge_fids:
                cross_by_frame[fid] = cross_by_frame.get(fid, 0) + n
                uid = fused.frames[fid].unit_id
                cross_by_unit[uid] = cross_by_unit.get(uid, 0) + n

    return AssemblyState(
        fused=fused,
        merge_scene_id=merge_bundle.scene_id,
        merge_unit_ids=merge_unit_ids,
        coarse_units=coarse_units,
        transform=SceneTransform.identity(),
        index=index,
        cross_count_by_unit=cross_by_unit,
        cross_count_by_frame=cross_by_frame,
        merge_camera_ids=merge_camera_ids,
    )


def init_transform(fine: Pose, coarse: Pose) -> SceneTransform:
    """The rigid map taking a coarse pose to its relocalized fine pose."""
    return SceneTransform.between_poses(fine, coarse)


def estimate_initial_transform(state: AssemblyState,
                               config: PipelineConfig) -> SceneTransform:
    """Relocalize the best cross-connected merge frame against the reference.

    Frames are tried in descending verified cross-match order; the first
    successful unconstrained PnP fixes the initial transform.  Raises
    AggregationFailure when every candidate frame fails.
    """
    ranked = sorted(state.cross_count_by_frame,
                    key=lambda fid: (-state.cross_count_by_frame[fid], fid))
    for fid in ranked:
        frame = state.fused.frames[fid]
        result = pnp_register(fid, state.fused, state.index, config)
        if not isinstance(result, PnPResult):
            continue
        rel = state.fused.camera(frame.camera_id).relative
        coarse_frame = camera_from_unit(state.coarse_units[frame.unit_id], rel)
        T = init_transform(result.pose, coarse_frame)
        logger.info("initial transform from frame %d (%d inliers)", fid,
                    result.inliers)
        return T
    raise AggregationFailure("no merge frame could be relocalized against the reference")


def _refresh_merge_units(state: AssemblyState) -> None:
    for uid in state.registered:
        state.fused.units[uid].pose = state.transform.apply_pose(
            state.coarse_units[uid])
    scale = state.transform.scale
    if abs(scale - state.applied_scale) > 1e-15:
        ratio = scale / state.applied_scale
        for cid in state.merge_camera_ids:
            cam = state.fused.camera(cid)
            from .geometry import RelativePose
            cam.relative = RelativePose(cam.relative.q, cam.relative.t * ratio)
        state.applied_scale = scale


def register_merge_unit(unit_id: int, state: AssemblyState,
                        config: PipelineConfig) -> bool:
    """Place one merge unit through the current transform and link tracks.

    Re-registering an already registered unit is rejected and leaves the
    state unchanged.  Returns True when the unit was newly registered.
    """
    if unit_id in state.registered:
        logger.debug("merge unit %d already registered", unit_id)
        return False
    if unit_id not in state.coarse_units:
        raise KeyError(f"unit {unit_id} does not belong to the merge scene")
    unit = state.fused.units[unit_id]
    unit.pose = state.transform.apply_pose(state.coarse_units[unit_id])
    unit.registered = True
    for fid in unit.frame_ids:
        state.fused.frames[fid].registered = True
    state.registered.add(unit_id)
    # generous gate: a strict one would only link observations that agree
    # with the current (still wrong) transform and starve the refinement
    triangulate_new_tracks(state.fused, state.index, config,
                           touched_frames=set(unit.frame_ids),
                           max_error_px=config.init_tri_error_px)
    return True


def transform_ba(state: AssemblyState, config: PipelineConfig,
                 loss: Optional[RobustLoss] = None) -> tuple[SceneTransform, SolveReport]:
    """Optimize the assembly transform and the shared points.

    Reference poses are fixed; merge residuals are parameterized through the
    transform applied to the coarse placement, so merge units move rigidly.
    With no cross-scene residuals the state is returned unchanged.
    """
    loss = loss or RobustLoss(config.ba_loss, config.ba_cauchy_scale_px)
    fused = state.fused
    merge_fids = {fid for uid in state.registered
                  for fid in fused.units[uid].frame_ids}

    point_ids = []
    for pid in sorted(fused.points):
        if any(fid in merge_fids for fid, _ in fused.points[pid].track):
            point_ids.append(pid)
    if not point_ids:
        logger.warning("transform BA skipped: no cross-scene residuals")
        report = SolveReport(0.0, 0.0, 0, "no_residuals", [0.0])
        return state.transform, report

    problem = BAProblem("scene_transform", loss)
    cam_index = {c.camera_id: i for i, c in enumerate(fused.rig)}
    problem.camera_ids = [c.camera_id for c in fused.rig]
    problem.intr = np.stack([c.intrinsics.as_array() for c in fused.rig])
    problem.tf_q = state.transform.q.copy()
    problem.tf_t = state.transform.t.copy()
    problem.tf_scale = state.transform.scale / state.applied_scale
    problem.tf_optimize_scale = bool(config.agg_use_scale)

    problem.point_ids = point_ids
    problem.X = np.stack([fused.points[p].position for p in point_ids])

    frame_rows: dict[int, int] = {}
    frame_ids: list[int] = []
    fq, ft, merge_flags = [], [], []
    obs_uv, obs_point, obs_cam, obs_frame = [], [], [], []
    for pi, pid in enumerate(point_ids):
        for fid, oi in fused.points[pid].track:
            frame = fused.frames[fid]
            if not frame.registered:
                continue
            if fid not in frame_rows:
                frame_rows[fid] = len(frame_ids)
                frame_ids.append(fid)
                if fid in merge_fids:
                    rel = fused.camera(frame.camera_id).relative
                    pose = camera_from_unit(state.coarse_units[frame.unit_id], rel)
                    merge_flags.append(True)
                else:
                    pose = fused.frame_pose(fid)
                    merge_flags.append(False)
                fq.append(pose.q)
                ft.append(pose.t)
            obs_uv.append(frame.observations[oi].pixel)
            obs_point.append(pi)
            obs_cam.append(cam_index[frame.camera_id])
            obs_frame.append(frame_rows[fid])
    problem.frame_ids = frame_ids
    problem.frame_q = np.stack(fq)
    problem.frame_t = np.stack(ft)
    problem.frame_is_merge = np.array(merge_flags)
    problem.obs_uv = np.array(obs_uv, dtype=float).reshape(-1, 2)
    problem.obs_point = np.array(obs_point, dtype=int)
    problem.obs_cam = np.array(obs_cam, dtype=int)
    problem.obs_frame = np.array(obs_frame, dtype=int)
    if not problem.frame_is_merge.any():
        logger.warning("transform BA skipped: no registered merge observations")
        report = SolveReport(0.0, 0.0, 0, "no_residuals", [0.0])
        return state.transform, report

    lm = LMConfig(
        max_iterations=config.lm_max_iterations,
        rel_decrease_tol=config.lm_rel_decrease_tol,
        gradient_tol=config.lm_gradient_tol,
        init_lambda=config.lm_init_lambda)
    # graduated robustness: the single-frame relocalization can start the
    # transform a degree or more off, where residuals sit far outside the
    # working Cauchy scale and starve the gradient; a wide first pass pulls
    # into the basin, the configured loss finishes
    if config.agg_coarse_loss_scale_px > loss.scale:
        wide = RobustLoss(loss.kind, config.agg_coarse_loss_scale_px)
        problem.loss = wide
        solve(problem, lm)
        problem.loss = loss
    report = solve(problem, lm)
    for pi, pid in enumerate(point_ids):
        fused.points[pid].position = problem.X[pi].copy()
    result = problem.transform_result()
    state.transform = SceneTransform(result.q, result.t,
                                     result.scale * state.applied_scale)
    _refresh_merge_units(state)
    return state.transform, report


def merge_pair(ref_bundle: SceneBundle, merge_bundle: SceneBundle,
               verified: dict[tuple[int, int], MatchPair],
               config: PipelineConfig) -> tuple[SceneBundle, list[SolveReport], SceneTransform]:
    """Assemble one merge scene into the reference and return the fusion."""
    from .ba import filter_after_ba

    state = coarse_assemble(ref_bundle, merge_bundle, verified)
    state.transform = estimate_initial_transform(state, config)

    order = sorted(state.merge_unit_ids,
                   key=lambda uid: (-state.cross_count_by_unit.get(uid, 0), uid))
    reports = []
    batch = max(1, config.agg_batch_units)
    pending = 0
    for uid in order:
        if register_merge_unit(uid, state, config):
            pending += 1
        if pending >= batch:
            _, report = transform_ba(state, config)
            reports.append(report)
            pending = 0
    if pending:
        _, report = transform_ba(state, config)
        reports.append(report)
    triangulate_new_tracks(state.fused, state.index, config,
                           max_error_px=config.init_tri_error_px)
    _, report = transform_ba(state, config)
    reports.append(report)
    # strict outlier sweep, then one more refinement on the clean links
    filter_after_ba(state.fused, config.tri_max_error_px, config.tri_min_angle_deg)
    _, report = transform_ba(state, config)
    reports.append(report)
    filter_after_ba(state.fused, config.tri_max_error_px, config.tri_min_angle_deg)
    logger.info("scene %d merged into %d: transform %s, %d units",
                merge_bundle.scene_id, ref_bundle.scene_id,
                np.round(state.transform.t, 3), len(state.registered))
    return (SceneBundle(ref_bundle.scene_id, state.fused, ref_bundle.anchor,
                        ref_bundle.labels), reports, state.transform)


@dataclass
class AggregationResult:
    bundle: SceneBundle
    leftovers: list[SceneBundle]
    reports: list[SolveReport]
    transforms: list[SceneTransform] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.leftovers


def aggregate_all(bundles: list[SceneBundle],
                  cross: dict[tuple[int, int], CrossMatches],
                  config: PipelineConfig) -> AggregationResult:
    """Fold all scenes into one map, reference-outward.

    Each round associates the pool, verifies the candidates' cross matches,
    merges the best-overlapping scene, and promotes the fusion to the new
    reference.  Scenes with no overlap against any reference survive as
    leftovers in a partial result.
    """
    if not bundles:
        raise ValueError("aggregate_all needs at least one bundle")
    pool = {b.scene_id: b for b in bundles}
    cross = {key: dict(v) for key, v in cross.items()}
    reports: list[SolveReport] = []
    transforms: list[SceneTransform] = []

    while len(pool) > 1:
        ref_id, cand_ids = associate_scenes(list(pool.values()))
        ref = pool[ref_id]
        candidates = [pool[i] for i in cand_ids]
        merge, verified = select_merge_scene(ref, candidates, cross, config)
        if merge is None:
            # widen to the whole pool before declaring the round dead
            rest = [pool[i] for i in sorted(pool) if i != ref_id
                    and i not in cand_ids]
            merge, verified = select_merge_scene(ref, rest, cross, config)
        if merge is None:
            logger.warning("aggregation stopped: remaining scenes share no overlap")
            break
        fused, merge_reports, transform = merge_pair(ref, merge, verified, config)
        reports.extend(merge_reports)
        transforms.append(transform)
        del pool[ref_id], pool[merge.scene_id]
        # re-key cross matches of the consumed scenes onto the fusion
        merged_cross: dict[tuple[int, int], CrossMatches] = {}
        for (a, b), pairs in cross.items():
            a2 = fused.scene_id if a in (ref_id, merge.scene_id) else a
            b2 = fused.scene_id if b in (ref_id, merge.scene_id) else b
            if a2 == b2:
                continue
            key = (min(a2, b2), max(a2, b2))
            merged_cross.setdefault(key, {}).update(pairs)
        cross = merged_cross
        pool[fused.scene_id] = fused
        ts = [u.timestamp for u in fused.reconstruction.units.values()]
        logger.info("pool now %d scenes (%d units fused)", len(pool), len(ts))

    ids = sorted(pool)
    main = pool[ids[0]]
    leftovers = [pool[i] for i in ids[1:]]
    if leftovers:
        logger.warning("partial aggregation: %d scenes left unmerged",
                       len(leftovers))
    return AggregationResult(main, leftovers, reports, transforms)
