"""Absolute pose from 2D-3D correspondences: P3P, RANSAC, robust refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    matrix_to_quat,
    quat_from_rotvec,
    quat_multiply,
    undistort_normalized,
)
from .reproj import project_with_jacobians, skew_batch

__all__ = ["PnPResult", "Rejection", "solve_p3p", "pnp_ransac", "refine_pose"]


@dataclass
class Rejection:
    """Variant result for operations that can decline without erroring."""

    reason: str


@dataclass
class PnPResult:
    pose: Pose
    inliers: int
    inlier_mask: np.ndarray
    mean_error_px: float


def _absolute_orientation(P: np.ndarray, Q: np.ndarray) -> Optional[Pose]:
    """Rigid pose with Q_i = R (P_i - t) in least squares (Kabsch)."""
    Pc = P.mean(axis=0)
    Qc = Q.mean(axis=0)
    H = (P - Pc).T @ (Q - Qc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    if not np.all(np.isfinite(R)):
        return None
    t = Pc - R.T @ Qc
    return Pose(matrix_to_quat(R), t)


def solve_p3p(points: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """Camera poses consistent with three 2D-3D correspondences.

    Args:
        points: (3, 3) world points.
        bearings: (3, 3) unit bearing vectors in the camera frame.

    Returns:
        Up to four poses.  Uses the classic distance formulation: the three
        law-of-cosines constraints reduce to a quartic in the ratio of two
        camera-to-point distances, built here by explicit polynomial
        arithmetic rather than hand-expanded coefficients.
    """
    P1, P2, P3 = points
    f1, f2, f3 = bearings
    a2 = float(np.sum((P2 - P3) ** 2))
    b2 = float(np.sum((P1 - P3) ** 2))
    c2 = float(np.sum((P1 - P2) ** 2))
    if min(a2, b2, c2) < 1e-16 or b2 < 1e-16:
        return []
    cos_a = float(np.dot(f2, f3))
    cos_b = float(np.dot(f1, f3))
    cos_g = float(np.dot(f1, f2))

    # with u = s2/s1, v = s3/s1 and B(v) = 1 + v^2 - 2 v cos_b:
    #   (i)  u^2 + v^2 - 2 u v cos_a = (a2/b2) B(v)
    #   (ii) 1 + u^2 - 2 u cos_g     = (c2/b2) B(v)
    # (i)-(ii) is linear in u; substituting u(v) into (ii) gives a quartic.
    B = np.array([1.0, -2.0 * cos_b, 1.0])                # ascending coeffs in v
    u_num = np.array([1.0, 0.0, -1.0]) + (a2 - c2) / b2 * B
    u_den = np.array([2.0 * cos_g, -2.0 * cos_a])

    ii_const = np.array([1.0, 0.0, 0.0]) - (c2 / b2) * B  # (ii) constant term in u
    pm = np.polynomial.polynomial.polymul

    def padded_sum(*polys):
        size = max(len(p) for p in polys)
        return sum(np.pad(p, (0, size - len(p))) for p in polys)

    quartic = padded_sum(
        pm(u_num, u_num),
        -2.0 * cos_g * pm(u_num, u_den),
        pm(pm(u_den, u_den), ii_const),
    )
    roots = np.polynomial.polynomial.polyroots(quartic)

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-8:
            continue
        v = float(v.real)
        if v <= 0:
            continue
        den = np.polynomial.polynomial.polyval(v, u_den)
        if abs(den) < 1e-12:
            continue
        u = float(np.polynomial.polynomial.polyval(v, u_num) / den)
        if u <= 0:
            continue
        Bv = 1.0 + v * v - 2.0 * v * cos_b
        if Bv <= 1e-16:
            continue
        s1 = np.sqrt(b2 / Bv)
        Q = np.stack([s1 * f1, u * s1 * f2, v * s1 * f3])
        pose = _absolute_orientation(points, Q)
        if pose is not None:
            poses.append(pose)
    return poses


def _reprojection_errors(K: CameraIntrinsics, pose: Pose, X: np.ndarray,
                         uv: np.ndarray) -> np.ndarray:
    Y = pose.to_frame(X)
    Karr = np.tile(K.as_array(), (len(X), 1))
    proj, _, valid = project_with_jacobians(Karr, Y)
    err = np.linalg.norm(proj - uv, axis=1)
    err[~valid] = np.inf
    return err


def refine_pose(
    K: CameraIntrinsics,
    pose: Pose,
    X: np.ndarray,
    uv: np.ndarray,
    cauchy_scale_px: float = 1.0,
    iterations: int = 15,
) -> Pose:
    """Robust nonlinear refinement of a single camera pose.

    Damped Gauss-Newton with Cauchy IRLS weights on the reprojection
    residuals; observations behind the camera contribute nothing.
    """
    q = pose.q.copy()
    t = pose.t.copy()
    Karr = np.tile(K.as_array(), (len(X), 1))
    lam = 1e-6
    c2 = cauchy_scale_px ** 2

    def eval_cost(q, t):
        Y = Pose(q, t).to_frame(X)
        proj, _, valid = project_with_jacobians(Karr, Y)
        r = uv - proj
        s = np.sum(r * r, axis=1)
        s[~valid] = 0.0
        return float(np.sum(c2 * np.log1p(s / c2))), r, valid

    cost, _, _ = eval_cost(q, t)
    for _ in range(iterations):
        p = Pose(q, t)
        Y = p.to_frame(X)
        proj, J_Y, valid = project_with_jacobians(Karr, Y)
        r = uv - proj
        s = np.sum(r * r, axis=1)
        w = 1.0 / (1.0 + s / c2)
        w[~valid] = 0.0
        R = p.rotation
        # r = obs - proj: d r/d(dtheta) = J_Y @ [Y]x ; d r/d t = J_Y @ R
        J = np.concatenate([
            np.einsum("mij,mjk->mik", J_Y, skew_batch(Y)),
            np.einsum("mij,jk->mik", J_Y, R),
        ], axis=2)
        Jw = J * w[:, None, None]
        H = np.einsum("mij,mik->jk", Jw, J)
        g = np.einsum("mij,mi->j", Jw, r)
        for _attempt in range(6):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            q_new = quat_multiply(quat_from_rotvec(delta[:3]), q)
            t_new = t + delta[3:]
            new_cost, _, _ = eval_cost(q_new, t_new)
            if new_cost <= cost:
                q, t, cost = q_new, t_new, new_cost
                lam = max(lam * 0.3, 1e-12)
                break
            lam *= 10.0
        else:
            break
        if np.linalg.norm(delta) < 1e-12:
            break
    return Pose(q, t)


def pnp_ransac(
    K: CameraIntrinsics,
    X: np.ndarray,
    uv: np.ndarray,
    rng: np.random.Generator,
    threshold_px: float = 4.0,
    min_inliers: int = 12,
    max_iterations: int = 200,
    min_iterations: int = 5,
    confidence: float = 0.9999,
    cauchy_scale_px: float = 1.0,
) -> PnPResult | Rejection:
    """RANSAC absolute pose with a minimal three-point solver.

    Returns a Rejection("insufficient") below four correspondences and
    Rejection("too_few_inliers") when the best model's support is under
    ``min_inliers``.  The winning pose is refined on its inliers.
    """
    n = len(X)
    if n < 4:
        return Rejection("insufficient")
    xd = (uv[:, 0] - K.cx) / K.fx
    yd = (uv[:, 1] - K.cy) / K.fy
    xn, yn = undistort_normalized(K, xd, yd)
    bearings = np.column_stack([xn, yn, np.ones(n)])
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    best_mask = np.zeros(n, dtype=bool)
    best_pose = None
    needed = max_iterations
    it = 0
    while it < min(max_iterations, max(needed, min_iterations)):
        sample = rng.choice(n, size=3, replace=False)
        for pose in solve_p3p(X[sample], bearings[sample]):
            err = _reprojection_errors(K, pose, X, uv)
            mask = err < threshold_px
            count = int(mask.sum())
            if count > int(best_mask.sum()):
                best_pose, best_mask = pose, mask
                ratio = count / n
                if ratio >= 1.0:
                    needed = 0
                elif ratio > 0:
                    fail = 1.0 - ratio ** 3
                    needed = (int(np.ceil(np.log(1.0 - confidence) / np.log(fail)))
                              if fail < 1.0 else max_iterations)
        it += 1

    if best_pose is None or int(best_mask.sum()) < min_inliers:
        return Rejection("too_few_inliers")
    pose = refine_pose(K, best_pose, X[best_mask], uv[best_mask],
                       cauchy_scale_px=cauchy_scale_px)
    err = _reprojection_errors(K, pose, X, uv)
    mask = err < threshold_px
    if int(mask.sum()) < min_inliers:
        return Rejection("too_few_inliers")
    return PnPResult(pose, int(mask.sum()), mask, float(err[mask].mean()))
