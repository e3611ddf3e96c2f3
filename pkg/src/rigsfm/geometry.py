"""Pose algebra and camera geometry primitives.

Conventions used throughout the package:

* A :class:`Pose` stores a unit quaternion ``q`` rotating world coordinates
  into the frame, and ``t``, the position of the frame origin expressed in
  world coordinates.  A world point ``X`` maps into the frame as
  ``x = R(q) @ (X - t)``.
* A :class:`RelativePose` is the fixed transform from a rig camera to its
  rigid unit: rotation ``R_cam @ R_unit.T`` and origin ``R_unit @ (t_cam -
  t_unit)`` (the camera origin expressed in the unit frame).
* Quaternions are Hamilton ``[w, x, y, z]`` and are renormalized after every
  operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "RelativePose",
    "CameraIntrinsics",
    "SceneTransform",
    "project",
    "project_points",
    "relative_of",
    "camera_from_unit",
    "rotation_geodesic",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_rotate",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_rotvec",
    "quat_to_rotvec",
    "quats_to_matrices",
    "random_quat",
    "undistort_normalized",
]

_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b (apply b's rotation first when used as R(a)R(b))."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion q; v may be (3,) or (N, 3)."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array([
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ])


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Vectorized quaternion-to-rotation-matrix for an (N, 4) array."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method, w >= 0)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-10:
        # first-order expansion keeps the map smooth through zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / angle
    h = 0.5 * angle
    return np.concatenate(([math.cos(h)], math.sin(h) * axis))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    vec_norm = np.linalg.norm(q[1:])
    angle = 2.0 * math.atan2(vec_norm, q[0])
    if vec_norm < 1e-10:
        return 2.0 * q[1:]
    return q[1:] * (angle / vec_norm)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_normalize(q)


def rotation_geodesic(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, in degrees [0, 180]."""
    d = quat_multiply(np.asarray(a, dtype=float), quat_conjugate(np.asarray(b, dtype=float)))
    angle = 2.0 * math.atan2(np.linalg.norm(d[1:]), abs(d[0]))
    return math.degrees(angle)


# ---------------------------------------------------------------------------
# rigid placements
# ---------------------------------------------------------------------------

def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid placement: world-to-frame rotation plus frame origin in world."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen_array(quat_normalize(self.q), (4,)))
        object.__setattr__(self, "t", _frozen_array(self.t, (3,)))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_frame(self, X: np.ndarray) -> np.ndarray:
        """World point(s) to frame coordinates: R (X - t)."""
        return quat_rotate(self.q, np.asarray(X, dtype=float) - self.t)

    def to_world(self, x: np.ndarray) -> np.ndarray:
        """Frame point(s) back to world coordinates: R^T x + t."""
        return quat_rotate(quat_conjugate(self.q), x) + self.t

    def compose(self, other: "Pose") -> "Pose":
        """Pose whose frame map applies ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        t = other.t + quat_rotate(quat_conjugate(other.q), self.t)
        return Pose(q, t)

    def inverse(self) -> "Pose":
        q = quat_conjugate(self.q)
        return Pose(q, -quat_rotate(self.q, self.t))


@dataclass(frozen=True)
class RelativePose:
    """Camera-to-unit transform: rotation R_cam R_unit^T, origin in unit frame."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen_array(quat_normalize(self.q), (4,)))
        object.__setattr__(self, "t", _frozen_array(self.t, (3,)))

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose()

    def as_pose(self) -> Pose:
        return Pose(self.q, self.t)


def relative_of(unit: Pose, camera: Pose) -> RelativePose:
    """Internal relative pose of a camera with respect to its rigid unit.

    Rotation is ``R_cam @ R_unit.T``; origin is ``R_unit @ (t_cam - t_unit)``,
    the camera origin expressed in the unit frame.
    """
    p = camera.compose(unit.inverse())
    return RelativePose(p.q, p.t)


def camera_from_unit(unit: Pose, rel: RelativePose) -> Pose:
    """Camera pose derived from a unit pose and the camera's relative pose.

    Exact inverse of :func:`relative_of`: rotation ``R_rel @ R_unit``, origin
    ``R_unit.T @ t_rel + t_unit``.
    """
    return rel.as_pose().compose(unit)


# ---------------------------------------------------------------------------
# intrinsics and projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with an optional two-parameter radial distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.k1, self.k2])

    @staticmethod
    def from_array(a: np.ndarray) -> "CameraIntrinsics":
        return CameraIntrinsics(*(float(v) for v in a))


def distort_normalized(K: CameraIntrinsics, xn: np.ndarray, yn: np.ndarray):
    r2 = xn * xn + yn * yn
    f = 1.0 + K.k1 * r2 + K.k2 * r2 * r2
    return f * xn, f * yn


def undistort_normalized(K: CameraIntrinsics, xd, yd, iterations: int = 10):
    """Invert the radial model by fixed-point iteration (exact when k1=k2=0)."""
    if K.k1 == 0.0 and K.k2 == 0.0:
        return xd, yd
    xn, yn = xd, yd
    for _ in range(iterations):
        r2 = xn * xn + yn * yn
        f = 1.0 + K.k1 * r2 + K.k2 * r2 * r2
        xn, yn = xd / f, yd / f
    return xn, yn


def project(K: CameraIntrinsics, pose: Pose, X: np.ndarray):
    """Project a world point to pixels; returns None when depth is non-positive.

    Realizes ``K . normalize(R (X - t))`` with radial distortion applied after
    the perspective division.
    """
    xc = pose.to_frame(X)
    if xc[2] <= 0.0:
        return None
    xn, yn = xc[0] / xc[2], xc[1] / xc[2]
    xd, yd = distort_normalized(K, xn, yn)
    return np.array([K.fx * xd + K.cx, K.fy * yd + K.cy])


def project_points(K: CameraIntrinsics, pose: Pose, X: np.ndarray):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,)); pixels are computed for all points,
    callers must mask on depth > 0 themselves.
    """
    xc = pose.to_frame(X)
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = xc[:, 0] / z
        yn = xc[:, 1] / z
        xd, yd = distort_normalized(K, xn, yn)
        uv = np.stack([K.fx * xd + K.cx, K.fy * yd + K.cy], axis=1)
    return uv, z


# ---------------------------------------------------------------------------
# scene-level rigid transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneTransform:
    """Rigid map of world coordinates, X' = R(q)^T-free form: X' = R X + t.

    Stored as the active rotation ``R`` (via quaternion) and translation ``t``
    acting on points; poses transform as rotation ``R_p R^T`` and origin
    ``R t_p + t``.  Optional uniform scale for the 7-DOF variant, default 1.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen_array(quat_normalize(self.q), (4,)))
        object.__setattr__(self, "t", _frozen_array(self.t, (3,)))
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @staticmethod
    def identity() -> "SceneTransform":
        return SceneTransform()

    def apply_points(self, X: np.ndarray) -> np.ndarray:
        return self.scale * quat_rotate(self.q, X) + self.t

    def apply_pose(self, p: Pose) -> Pose:
        return Pose(quat_multiply(p.q, quat_conjugate(self.q)), self.apply_points(p.t))

    def compose(self, other: "SceneTransform") -> "SceneTransform":
        """Transform applying ``other`` first, then ``self``."""
        return SceneTransform(
            quat_multiply(self.q, other.q),
            self.scale * quat_rotate(self.q, other.t) + self.t,
            self.scale * other.scale,
        )

    def inverse(self) -> "SceneTransform":
        qi = quat_conjugate(self.q)
        return SceneTransform(qi, -quat_rotate(qi, self.t) / self.scale, 1.0 / self.scale)

    @staticmethod
    def between_poses(fine: Pose, coarse: Pose) -> "SceneTransform":
        """The rigid transform T with T(coarse) = fine (6-DOF)."""
        q = quat_multiply(quat_conjugate(fine.q), coarse.q)
        t = fine.t - quat_rotate(q, coarse.t)
        return SceneTransform(q, t)
