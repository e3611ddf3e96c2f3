"""Vectorized reprojection residuals and analytic Jacobians.

Shared by PnP refinement, triangulation refinement, and bundle adjustment.
All pose rotation Jacobians use left (frame-side) perturbations:
``R <- Exp(delta) @ R``; the corresponding quaternion update is
``q <- quat_from_rotvec(delta) * q``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["project_with_jacobians", "skew", "skew_batch"]


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def project_with_jacobians(K: np.ndarray, Y: np.ndarray, want_intrinsics: bool = False):
    """Pixel projections of camera-frame points with analytic Jacobians.

    Args:
        K: (m, 6) intrinsics rows [fx, fy, cx, cy, k1, k2].
        Y: (m, 3) points in camera coordinates.
        want_intrinsics: also return d(uv)/d(intrinsics).

    Returns:
        uv (m, 2), J_Y (m, 2, 3), and J_K (m, 2, 6) when requested.  Entries
        with non-positive depth are computed with a clamped depth; callers
        must mask them via the returned ``valid`` array.
    """
    fx, fy, cx, cy, k1, k2 = (K[:, i] for i in range(6))
    z = Y[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    xn = Y[:, 0] / zs
    yn = Y[:, 1] / zs
    r2 = xn * xn + yn * yn
    f = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = f * xn
    yd = f * yn
    uv = np.stack([fx * xd + cx, fy * yd + cy], axis=1)

    df = 2.0 * (k1 + 2.0 * k2 * r2)
    dxd_dxn = f + xn * xn * df
    dxd_dyn = xn * yn * df
    dyd_dyn = f + yn * yn * df

    # d(xn, yn)/dY
    Jn = np.zeros((len(Y), 2, 3))
    Jn[:, 0, 0] = 1.0 / zs
    Jn[:, 0, 2] = -xn / zs
    Jn[:, 1, 1] = 1.0 / zs
    Jn[:, 1, 2] = -yn / zs

    Jd = np.empty((len(Y), 2, 2))
    Jd[:, 0, 0] = fx * dxd_dxn
    Jd[:, 0, 1] = fx * dxd_dyn
    Jd[:, 1, 0] = fy * dxd_dyn
    Jd[:, 1, 1] = fy * dyd_dyn

    J_Y = np.einsum("mij,mjk->mik", Jd, Jn)

    if not want_intrinsics:
        return uv, J_Y, valid

    J_K = np.zeros((len(Y), 2, 6))
    J_K[:, 0, 0] = xd
    J_K[:, 1, 1] = yd
    J_K[:, 0, 2] = 1.0
    J_K[:, 1, 3] = 1.0
    J_K[:, 0, 4] = fx * xn * r2
    J_K[:, 1, 4] = fy * yn * r2
    J_K[:, 0, 5] = fx * xn * r2 * r2
    J_K[:, 1, 5] = fy * yn * r2 * r2
    return uv, J_Y, J_K, valid
