"""Multi-view triangulation and road-surface outlier removal.

Road points triangulated from shadow edges and weak texture scatter off the
true surface; fitting a locally optimized RANSAC plane to recently observed
road-labelled points and deleting the far ones keeps the surface consistent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInputError
from .geometry import CameraIntrinsics, Pose, project, undistort_normalized
from .model import Reconstruction, ScenePoint
from .pnp import Rejection

logger = logging.getLogger(__name__)

__all__ = [
    "TriangulationObservation",
    "PlaneModel",
    "triangulate_track",
    "fit_plane_loransac",
    "filter_road_points",
]


@dataclass
class TriangulationObservation:
    """One observation of a candidate point, with its frame's geometry."""

    pixel: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics
    frame_id: int
    obs_idx: int
    semantic_label: int = -1


def _max_pairwise_angle_deg(X: np.ndarray, centers: np.ndarray) -> float:
    rays = X[None, :] - centers
    norms = np.linalg.norm(rays, axis=1)
    ok = norms > 1e-12
    rays = rays[ok] / norms[ok, None]
    if len(rays) < 2:
        return 0.0
    min_cos = float(np.clip((rays @ rays.T).min(), -1.0, 1.0))
    return math.degrees(math.acos(min_cos))


def _refine_point(X: np.ndarray, obs: Sequence[TriangulationObservation],
                  iterations: int = 5) -> np.ndarray:
    """A few Gauss-Newton steps on the reprojection error of one point."""
    from .reproj import project_with_jacobians

    K = np.stack([o.intrinsics.as_array() for o in obs])
    Rm = np.stack([o.pose.rotation for o in obs])
    tm = np.stack([o.pose.t for o in obs])
    uv_obs = np.stack([o.pixel for o in obs])
    lam = 1e-8

    def residuals(Xc):
        Y = np.einsum("mij,mj->mi", Rm, Xc[None, :] - tm)
        uv, J_Y, valid = project_with_jacobians(K, Y)
        r = uv_obs - uv
        r[~valid] = 0.0
        J = np.einsum("mij,mjk->mik", J_Y, Rm)
        J[~valid] = 0.0
        return r, J

    r, J = residuals(X)
    cost = float(np.sum(r * r))
    for _ in range(iterations):
        H = np.einsum("mij,mik->jk", J, J)
        g = np.einsum("mij,mi->j", J, r)
        try:
            delta = np.linalg.solve(H + lam * np.eye(3), g)
        except np.linalg.LinAlgError:
            break
        X_new = X + delta
        r_new, J_new = residuals(X_new)
        cost_new = float(np.sum(r_new * r_new))
        if cost_new <= cost:
            X, r, J, cost = X_new, r_new, J_new, cost_new
            lam = max(lam * 0.3, 1e-12)
        else:
            lam *= 10.0
        if np.linalg.norm(delta) < 1e-14:
            break
    return X


def triangulate_track(
    observations: Sequence[TriangulationObservation],
    min_angle_deg: float = 1.5,
    max_error_px: float = 4.0,
) -> ScenePoint | Rejection:
    """Triangulate a track by linear multi-view intersection plus refinement.

    Accepted only with positive depth in every view, a maximum pairwise
    triangulation angle of at least ``min_angle_deg``, and reprojection error
    at most ``max_error_px`` in every view.  Rejection reasons: "cheirality",
    "angle", "reprojection".
    """
    if len(observations) < 2:
        return Rejection("insufficient")

    rows = []
    rhs = []
    for o in observations:
        K = o.intrinsics
        xd = (o.pixel[0] - K.cx) / K.fx
        yd = (o.pixel[1] - K.cy) / K.fy
        xn, yn = undistort_normalized(K, xd, yd)
        R = o.pose.rotation
        t = o.pose.t
        rows.append(xn * R[2] - R[0])
        rhs.append(float((xn * R[2] - R[0]) @ t))
        rows.append(yn * R[2] - R[1])
        rhs.append(float((yn * R[2] - R[1]) @ t))
    A = np.array(rows)
    b = np.array(rhs)
    X, *_ = np.linalg.lstsq(A, b, rcond=None)
    X = _refine_point(X, observations)

    centers = np.stack([o.pose.t for o in observations])
    # angle first: for (near-)parallel rays the intersection point is
    # arbitrary, but the angle is degenerate wherever it lands
    if _max_pairwise_angle_deg(X, centers) < min_angle_deg:
        return Rejection("angle")
    depths = np.array([o.pose.to_frame(X)[2] for o in observations])
    if np.any(depths <= 0):
        return Rejection("cheirality")
    errors = []
    for o in observations:
        uv = project(o.intrinsics, o.pose, X)
        if uv is None:
            return Rejection("cheirality")
        errors.append(float(np.linalg.norm(uv - o.pixel)))
    if max(errors) > max_error_px:
        return Rejection("reprojection")

    label = observations[0].semantic_label
    return ScenePoint(
        X, label,
        [(o.frame_id, o.obs_idx) for o in observations],
        float(np.mean(errors)),
    )


# ---------------------------------------------------------------------------
# plane fitting
# ---------------------------------------------------------------------------

@dataclass
class PlaneModel:
    """Plane {x : normal . x = offset} with its inlier support."""

    normal: np.ndarray
    offset: float
    inlier_threshold: float
    inlier_count: int
    inlier_mask: np.ndarray

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal - self.offset)


def _ls_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return normal, float(normal @ centroid)


def fit_plane_loransac(
    points: np.ndarray,
    inlier_threshold: float = 0.15,
    rng: Optional[np.random.Generator] = None,
    max_iterations: int = 100,
    lo_iterations: int = 10,
) -> PlaneModel:
    """Locally optimized RANSAC plane fit.

    Each time a minimal sample beats the incumbent, the model is polished by
    repeated least-squares refits on its current inlier set (at most
    ``lo_iterations`` inner rounds).  Deterministic under a fixed generator.
    Raises DegenerateInputError when the input is collinear.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n < 3:
        raise DegenerateInputError(f"plane fit needs at least 3 points, got {n}")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateInputError("plane fit input points are collinear")
    if rng is None:
        rng = np.random.default_rng(0)

    best: Optional[PlaneModel] = None
    for _ in range(max_iterations):
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = points[idx]
        cross = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(cross)
        scale = max(np.linalg.norm(p1 - p0) * np.linalg.norm(p2 - p0), 1e-12)
        if norm < 1e-9 * scale:
            continue
        normal = cross / norm
        offset = float(normal @ p0)
        mask = np.abs(points @ normal - offset) <= inlier_threshold
        count = int(mask.sum())
        if best is not None and count <= best.inlier_count:
            continue
        # local optimization: iterate LS refits on the inlier set
        for _inner in range(lo_iterations):
            if mask.sum() < 3:
                break
            normal_lo, offset_lo = _ls_plane(points[mask])
            mask_lo = np.abs(points @ normal_lo - offset_lo) <= inlier_threshold
            count_lo = int(mask_lo.sum())
            if count_lo < count:
                break
            converged = np.array_equal(mask_lo, mask)
            normal, offset, mask, count = normal_lo, float(offset_lo), mask_lo, count_lo
            if converged:
                break
        if best is None or count > best.inlier_count:
            best = PlaneModel(normal, offset, inlier_threshold, count, mask)
    if best is None:
        raise DegenerateInputError("no non-degenerate minimal sample found")
    return best


def filter_road_points(
    recon: Reconstruction,
    road_label: int,
    window_unit_ids: Sequence[int],
    inlier_threshold: float = 0.15,
    min_road_points: int = 30,
    rng: Optional[np.random.Generator] = None,
    max_iterations: int = 100,
    lo_iterations: int = 10,
) -> list[int]:
    """Delete road-labelled points that stray from the local road plane.

    Fits the plane to road points observed from the frames of
    ``window_unit_ids`` (roads are only locally planar, so callers pass the
    most recently registered units) and removes the candidates farther than
    the threshold.  Points of any other semantic class are never touched.

    Returns the ids of the deleted points.
    """
    window_frames: set[int] = set()
    for uid in window_unit_ids:
        window_frames.update(recon.units[uid].frame_ids)
    candidates = []
    for pid, point in recon.points.items():
        if point.semantic_label != road_label:
            continue
        if any(fid in window_frames for fid, _ in point.track):
            candidates.append(pid)
    if len(candidates) < min_road_points:
        logger.info("road filter: only %d road points in window, skipping",
                    len(candidates))
        return []
    pts = np.stack([recon.points[pid].position for pid in candidates])
    try:
        model = fit_plane_loransac(pts, inlier_threshold, rng,
                                   max_iterations, lo_iterations)
    except DegenerateInputError:
        logger.warning("road filter: degenerate road geometry in window, skipping")
        return []
    removed = [pid for pid, far in zip(candidates, ~model.inlier_mask) if far]
    for pid in removed:
        recon.remove_point(pid)
    if removed:
        logger.info("road filter: removed %d of %d windowed road points",
                    len(removed), len(candidates))
    return removed
