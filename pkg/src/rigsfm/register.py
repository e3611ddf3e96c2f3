"""Camera set registration: prior-based initialization, PnP, pose fusion.

A rigid unit is registered by estimating correspondence-rich member frames
independently with PnP, converting each estimate into a vehicle-pose vote,
fusing the votes by robust rotation and translation averaging, and then
deriving every member frame's pose (including occluded frames that produced
no PnP solution) from the fused unit pose and the rig's relative poses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import InitializationFailure
from .geometry import (
    Pose,
    RelativePose,
    camera_from_unit,
    quat_conjugate,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_rotvec,
)
from .ingest import CorrespondenceGraph
from .model import Reconstruction
from .pnp import PnPResult, Rejection, pnp_ransac
from .triangulate import TriangulationObservation, triangulate_track

logger = logging.getLogger(__name__)

__all__ = [
    "RegistrationCandidate",
    "unit_pose_vote",
    "select_initial_units",
    "initialize_model",
    "next_best_unit",
    "pnp_register",
    "fuse_unit_rotation",
    "fuse_unit_translation",
    "register_unit",
    "triangulate_new_tracks",
]


@dataclass
class RegistrationCandidate:
    unit_id: int
    visible_per_frame: dict[int, int]
    score: float

    @property
    def total_visible(self) -> int:
        return sum(self.visible_per_frame.values())


def unit_pose_vote(camera: Pose, rel: RelativePose) -> Pose:
    """Vehicle-pose vote implied by one camera estimate.

    Exact inverse of the frame-pose derivation: rotation R_rel^T R_cam and
    origin t_cam - R_unit^T t_rel evaluated at that rotation.
    """
    q_u = quat_normalize(quat_multiply(quat_conjugate(rel.q), camera.q))
    t_u = camera.t - quat_rotate(quat_conjugate(q_u), rel.t)
    return Pose(q_u, t_u)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def select_initial_units(
    graph: CorrespondenceGraph,
    frames,
    priors: dict[int, tuple[float, Pose]],
    config: PipelineConfig,
) -> tuple[int, int]:
    """The unit pair with the most verified inlier support.

    Scores every unit pair by the summed verified inlier matches over all
    frame pairs between and within the two units, subject to a minimum prior
    baseline; raises InitializationFailure when no pair reaches the floor.
    """
    unit_of = {fid: f.unit_id for fid, f in frames.items()}
    within: dict[int, int] = {}
    across: dict[tuple[int, int], int] = {}
    for (fa, fb), pair in graph.pairs.items():
        if not pair.verified:
            continue
        n = int(pair.inlier_mask.sum())
        ua, ub = unit_of[fa], unit_of[fb]
        if ua == ub:
            within[ua] = within.get(ua, 0) + n
        else:
            key = (min(ua, ub), max(ua, ub))
            across[key] = across.get(key, 0) + n

    unit_ids = sorted({f.unit_id for f in frames.values()})
    best = None
    best_score = -1
    for i, ua in enumerate(unit_ids):
        for ub in unit_ids[i + 1:]:
            baseline = float(np.linalg.norm(priors[ua][1].t - priors[ub][1].t))
            if baseline < config.init_min_baseline_m:
                continue
            score = (within.get(ua, 0) + within.get(ub, 0)
                     + across.get((ua, ub), 0))
            if score > best_score:
                best, best_score = (ua, ub), score
    if best is None or best_score < config.init_min_correspondences:
        raise InitializationFailure(
            f"no unit pair reaches {config.init_min_correspondences} verified "
            f"matches at baseline >= {config.init_min_baseline_m} m")
    return best


def triangulate_new_tracks(
    recon: Reconstruction,
    index,
    config: PipelineConfig,
    restrict_frames: Optional[set[int]] = None,
    touched_frames: Optional[set[int]] = None,
    max_error_px: Optional[float] = None,
) -> int:
    """Create or extend scene points from graph tracks in registered frames.

    Tracks without a live point and with two or more registered observations
    are triangulated (tracks whose earlier point was filtered away get
    another chance once poses improve); tracks with a live point absorb
    their newly registered observations when the reprojection error stays
    under the cap.  When ``touched_frames`` is given, only tracks seen by
    those frames are rescanned.  Returns the number of new points.
    """
    from .geometry import project

    max_err = config.tri_max_error_px if max_error_px is None else max_error_px
    added = 0
    pose_cache: dict[int, Optional[Pose]] = {}

    def cached_pose(fid: int) -> Optional[Pose]:
        if fid not in pose_cache:
            pose_cache[fid] = recon.frame_pose(fid)
        return pose_cache[fid]

    if touched_frames is None:
        scan = range(len(index.tracks))
    else:
        hits: set[int] = set()
        for fid in touched_frames:
            hits.update(index.tracks_by_frame.get(fid, ()))
        scan = sorted(hits)

    for ti in scan:
        track = index.tracks[ti]
        status = index.status(recon, ti)
        entries = []
        for frame_id, obs_idx in track:
            frame = recon.frames.get(frame_id)
            if frame is None or not frame.registered:
                continue
            if restrict_frames is not None and frame_id not in restrict_frames:
                continue
            entries.append((frame_id, obs_idx))
        if not entries:
            continue

        if status != "live":
            if len(entries) < 2:
                continue
            tri_obs = []
            for frame_id, obs_idx in entries:
                frame = recon.frames[frame_id]
                tri_obs.append(TriangulationObservation(
                    frame.observations[obs_idx].pixel,
                    cached_pose(frame_id),
                    recon.camera(frame.camera_id).intrinsics,
                    frame_id, obs_idx,
                    frame.observations[obs_idx].semantic_label))
            result = triangulate_track(tri_obs, config.tri_min_angle_deg, max_err)
            if isinstance(result, Rejection):
                continue
            index.point_of[ti] = recon.add_point(result)
            added += 1
        else:
            point_id = index.point_of[ti]
            point = recon.points[point_id]
            have = set(point.track)
            for frame_id, obs_idx in entries:
                if (frame_id, obs_idx) in have:
                    continue
                frame = recon.frames[frame_id]
                obs = frame.observations[obs_idx]
                if obs.track_id is not None:
                    continue
                uv = project(recon.camera(frame.camera_id).intrinsics,
                             cached_pose(frame_id), point.position)
                if uv is None:
                    continue
                if float(np.linalg.norm(uv - obs.pixel)) > max_err:
                    continue
                point.track.append((frame_id, obs_idx))
                obs.track_id = point_id
    return added


def initialize_model(
    unit_pair: tuple[int, int],
    recon: Reconstruction,
    index,
    priors: dict[int, tuple[float, Pose]],
    config: PipelineConfig,
) -> None:
    """Register the initial unit pair from priors and build the first points.

    Unit poses come straight from the priors, frame poses are derived through
    the rig, the tracks between the two units are triangulated, and a global
    camera-set BA pass polishes the seed model.  Raises InitializationFailure
    when the pair is degenerate or too few points survive.
    """
    from .ba import RobustLoss, build_global_csba, filter_after_ba
    from .solver import LMConfig, solve

    ua, ub = unit_pair
    baseline = float(np.linalg.norm(priors[ua][1].t - priors[ub][1].t))
    if baseline < config.init_min_baseline_m:
        raise InitializationFailure(
            f"initial pair baseline {baseline:.3f} m below "
            f"{config.init_min_baseline_m} m")
    member_frames: set[int] = set()
    for uid in (ua, ub):
        unit = recon.units[uid]
        unit.pose = priors[uid][1]
        unit.registered = True
        for fid in unit.frame_ids:
            recon.frames[fid].registered = True
            member_frames.add(fid)

    # generous acceptance here: prior error inflates reprojection until the
    # seed BA has pulled the pair into agreement, then the strict filter runs
    triangulate_new_tracks(recon, index, config, restrict_frames=member_frames,
                           max_error_px=config.init_tri_error_px)
    if recon.points:
        # rig stays locked on the two-unit seed: a fully free rig here would
        # absorb the prior misfit into the calibration
        problem = build_global_csba(
            recon, RobustLoss(config.ba_loss, config.ba_cauchy_scale_px),
            free_rig=False)
        solve(problem, LMConfig(max_iterations=config.lm_max_iterations,
                                rel_decrease_tol=config.lm_rel_decrease_tol,
                                gradient_tol=config.lm_gradient_tol))
        problem.update_reconstruction(recon)
        # second pass catches tracks whose first triangulation was rejected
        # under the raw prior poses
        triangulate_new_tracks(recon, index, config,
                               restrict_frames=member_frames,
                               max_error_px=config.init_tri_error_px)
        problem = build_global_csba(
            recon, RobustLoss(config.ba_loss, config.ba_cauchy_scale_px),
            free_rig=False)
        solve(problem, LMConfig(max_iterations=config.lm_max_iterations,
                                rel_decrease_tol=config.lm_rel_decrease_tol,
                                gradient_tol=config.lm_gradient_tol))
        problem.update_reconstruction(recon)
        filter_after_ba(recon, config.tri_max_error_px, config.tri_min_angle_deg)
    if len(recon.points) < config.init_min_points:
        raise InitializationFailure(
            f"only {len(recon.points)} points survive initialization "
            f"(need {config.init_min_points})")
    logger.info("initialized from units (%d, %d): %d points", ua, ub,
                len(recon.points))


# ---------------------------------------------------------------------------
# next-best selection
# ---------------------------------------------------------------------------

def _coverage_score(pixels: np.ndarray, width: int, height: int,
                    base_cells: int, levels: int) -> float:
    """Occupied-cell count summed over grid pyramid levels.

    Spread-out observations outscore the same count clustered in few cells;
    adding an observation never lowers the score.
    """
    score = 0.0
    for level in range(levels):
        cells = base_cells * (2 ** level)
        cu = np.clip((pixels[:, 0] / width * cells).astype(int), 0, cells - 1)
        cv = np.clip((pixels[:, 1] / height * cells).astype(int), 0, cells - 1)
        score += len(np.unique(cu * cells + cv))
    return score


def next_best_unit(
    recon: Reconstruction,
    index,
    config: PipelineConfig,
    exclude: Sequence[int] = (),
) -> Optional[RegistrationCandidate]:
    """Highest-scoring unregistered unit, or None when none remains viable.

    A frame's score counts the image-grid cells its visible triangulated
    tracks cover across a two-level pyramid; the unit score sums its frames.
    Units whose total visible track count is below the minimum are not
    candidates.
    """
    best: Optional[RegistrationCandidate] = None
    for uid in sorted(recon.units):
        unit = recon.units[uid]
        if unit.registered or uid in set(exclude):
            continue
        per_frame: dict[int, int] = {}
        score = 0.0
        for fid in unit.frame_ids:
            frame = recon.frames[fid]
            pix = [obs.pixel for oi, obs in enumerate(frame.observations)
                   if index.live_point(recon, fid, oi) is not None]
            per_frame[fid] = len(pix)
            if pix:
                score += _coverage_score(np.stack(pix), frame.width, frame.height,
                                         config.register_grid_cells,
                                         config.register_pyramid_levels)
        cand = RegistrationCandidate(uid, per_frame, score)
        if cand.total_visible < config.register_min_visible:
            continue
        if best is None or cand.score > best.score:
            best = cand
    return best


# ---------------------------------------------------------------------------
# PnP and fusion
# ---------------------------------------------------------------------------

def pnp_register(
    frame_id: int,
    recon: Reconstruction,
    index,
    config: PipelineConfig,
) -> PnPResult | Rejection:
    """Absolute pose of one frame from its 2D-3D track correspondences."""
    frame = recon.frames[frame_id]
    X, uv = [], []
    for oi, obs in enumerate(frame.observations):
        pid = index.live_point(recon, frame_id, oi)
        if pid is not None:
            X.append(recon.points[pid].position)
            uv.append(obs.pixel)
    if len(X) < 4:
        return Rejection("insufficient")
    rng = np.random.default_rng(
        np.random.SeedSequence((config.derived_seed(frame_id), 0xA11)))
    return pnp_ransac(
        recon.camera(frame.camera_id).intrinsics,
        np.array(X), np.array(uv), rng,
        threshold_px=config.pnp_threshold_px,
        min_inliers=config.pnp_min_inliers,
        max_iterations=config.pnp_max_iterations,
        min_iterations=config.pnp_min_iterations,
        confidence=config.pnp_confidence,
        cauchy_scale_px=config.ba_cauchy_scale_px,
    )


def fuse_unit_rotation(
    votes: Sequence[np.ndarray],
    scale_deg: float = 2.0,
    weights: Optional[Sequence[float]] = None,
    tol: float = 1e-8,
    max_iterations: int = 50,
) -> np.ndarray:
    """Robust geodesic average of unit-rotation votes (quaternions).

    Chordal-mean initialization followed by IRLS in the tangent space at the
    current estimate with a Cauchy weight on the geodesic angle.  Iterated to
    ``tol`` (radians of tangent step) or ``max_iterations``.
    """
    if len(votes) == 0:
        raise ValueError("rotation fusion requires at least one vote")
    qs = np.stack([quat_normalize(q) for q in votes])
    base_w = np.ones(len(qs)) if weights is None else np.asarray(weights, float)
    # chordal mean via the principal eigenvector of the weighted outer products
    signs = np.where(qs @ qs[0] < 0, -1.0, 1.0)
    qs = qs * signs[:, None]
    M = np.einsum("n,ni,nj->ij", base_w, qs, qs)
    _, vecs = np.linalg.eigh(M)
    mu = quat_normalize(vecs[:, -1])

    c = np.radians(scale_deg)
    for _ in range(max_iterations):
        deltas = np.stack([quat_to_rotvec(quat_multiply(q, quat_conjugate(mu)))
                           for q in qs])
        angles = np.linalg.norm(deltas, axis=1)
        w = base_w / (1.0 + (angles / c) ** 2)
        step = (w[:, None] * deltas).sum(axis=0) / max(w.sum(), 1e-12)
        mu = quat_normalize(quat_multiply(quat_from_rotvec(step), mu))
        if np.linalg.norm(step) < tol:
            break
    return mu


def fuse_unit_translation(
    votes: Sequence[np.ndarray],
    scale_m: float = 0.5,
    weights: Optional[Sequence[float]] = None,
    loss: str = "cauchy",
    tol: float = 1e-8,
    max_iterations: int = 50,
) -> np.ndarray:
    """Robust average of unit-origin votes by IRLS.

    With a quadratic loss (or a single vote) this is the weighted mean; with
    the default Cauchy loss far votes are progressively discounted.
    """
    if len(votes) == 0:
        raise ValueError("translation fusion requires at least one vote")
    V = np.stack([np.asarray(v, dtype=float) for v in votes])
    base_w = np.ones(len(V)) if weights is None else np.asarray(weights, float)
    t = (base_w[:, None] * V).sum(axis=0) / max(base_w.sum(), 1e-12)
    if loss == "quadratic" or len(V) == 1:
        return t
    for _ in range(max_iterations):
        d2 = np.sum((V - t) ** 2, axis=1)
        w = base_w / (1.0 + d2 / (scale_m * scale_m))
        t_new = (w[:, None] * V).sum(axis=0) / max(w.sum(), 1e-12)
        if np.linalg.norm(t_new - t) < tol:
            t = t_new
            break
        t = t_new
    return t


def register_unit(
    unit_id: int,
    recon: Reconstruction,
    index,
    config: PipelineConfig,
) -> str:
    """Register one rigid unit; returns "registered" or "deferred".

    Every member frame with enough correspondences is estimated by PnP; the
    successes vote on the vehicle pose (rotation and translation fused
    separately), and all member frames, including those whose PnP failed,
    receive poses derived through the rig.  With camera-set registration
    disabled, each frame keeps only its own PnP pose and failed frames stay
    unregistered.
    """
    unit = recon.units[unit_id]
    results: list[tuple[int, PnPResult]] = []
    for fid in unit.frame_ids:
        res = pnp_register(fid, recon, index, config)
        if isinstance(res, PnPResult):
            results.append((fid, res))
        else:
            logger.debug("unit %d frame %d: pnp %s", unit_id, fid, res.reason)
    if not results:
        logger.info("unit %d: no PnP success, deferred", unit_id)
        return "deferred"

    weights = ([float(r.inliers) for _, r in results]
               if config.fuse_weight_by_inliers else None)
    votes = [unit_pose_vote(r.pose, recon.camera(recon.frames[fid].camera_id).relative)
             for fid, r in results]
    q = fuse_unit_rotation([v.q for v in votes], config.fuse_rotation_scale_deg,
                           weights, config.fuse_irls_tol,
                           config.fuse_irls_max_iterations)
    t = fuse_unit_translation([v.t for v in votes], config.fuse_translation_scale_m,
                              weights, "cauchy", config.fuse_irls_tol,
                              config.fuse_irls_max_iterations)
    unit.pose = Pose(q, t)
    unit.registered = True
    if config.use_camera_set_registration:
        for fid in unit.frame_ids:
            recon.frames[fid].registered = True
            recon.frames[fid].pose_override = None
    else:
        registered_fids = {fid for fid, _ in results}
        for fid, res in results:
            recon.frames[fid].pose_override = res.pose
            recon.frames[fid].registered = True
        for fid in unit.frame_ids:
            if fid not in registered_fids:
                recon.frames[fid].registered = False
    logger.info("unit %d registered from %d/%d PnP frames", unit_id,
                len(results), len(unit.frame_ids))
    return "registered"
