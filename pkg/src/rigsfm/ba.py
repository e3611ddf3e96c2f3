"""Bundle adjustment problems over rigid camera sets.

Three problem flavours share one parameterization and solver:

* ``camera_set``: vehicle (unit) poses, per-camera relative poses, and
  per-camera intrinsics are the pose-side variables; frame poses are
  expression nodes composed from unit and relative poses, never parameters,
  so the rig stays exactly rigid through the solve.  Local variants fix the
  relative poses and intrinsics and free only a connected subset of units.
* ``per_image``: the traditional baseline with one free pose per image and
  no rigidity coupling.
* ``scene_transform``: a single rigid (optionally scaled) map from a
  coarsely assembled merge scene into the reference frame, optimized
  together with the scene points while reference poses stay fixed.

Rotations update by left multiplication ``R <- Exp(delta) R``; the analytic
Jacobians in ``_evaluate`` follow that convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    Pose,
    RelativePose,
    SceneTransform,
    quat_from_rotvec,
    quat_multiply,
    quats_to_matrices,
)
from .model import Reconstruction
from .reproj import project_with_jacobians, skew_batch

__all__ = [
    "RobustLoss",
    "BAProblem",
    "build_local_csba",
    "build_global_csba",
    "build_traditional_ba",
    "choose_ba_scope",
    "filter_after_ba",
]


@dataclass(frozen=True)
class RobustLoss:
    """Loss on squared residual norms: rho(0) = 0, rho'(0) = 1.

    ``cauchy``: rho(s) = c^2 log(1 + s / c^2), bounded influence.
    ``quadratic``: rho(s) = s.
    """

    kind: str = "cauchy"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("quadratic", "cauchy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("loss scale must be positive")

    def rho(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            return np.asarray(s, dtype=float)
        c2 = self.scale * self.scale
        return c2 * np.log1p(np.asarray(s, dtype=float) / c2)

    def weight(self, s: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            return np.ones_like(np.asarray(s, dtype=float))
        c2 = self.scale * self.scale
        return 1.0 / (1.0 + np.asarray(s, dtype=float) / c2)


@dataclass
class _CamBlock:
    """One family of camera-side Jacobian blocks for sparse assembly."""

    jac: np.ndarray        # (m, 2, d)
    col: np.ndarray        # (m,) column offset into the reduced system, -1 if fixed
    dim: int


class BAProblem:
    """Parameter storage plus vectorized residual/Jacobian evaluation."""

    def __init__(self, mode: str, loss: RobustLoss):
        if mode not in ("camera_set", "per_image", "scene_transform"):
            raise ValueError(f"unknown BA mode {mode!r}")
        self.mode = mode
        self.loss = loss

        # camera_set parameters
        self.unit_ids: list[int] = []
        self.unit_q = np.zeros((0, 4))
        self.unit_t = np.zeros((0, 3))
        self.unit_free = np.zeros(0, dtype=bool)
        self.rel_q = np.zeros((0, 4))
        self.rel_t = np.zeros((0, 3))
        self.rel_free = np.zeros(0, dtype=bool)
        self.intr = np.zeros((0, 6))
        self.intr_free = np.zeros(0, dtype=bool)
        self.camera_ids: list[int] = []

        # per_image parameters
        self.frame_ids: list[int] = []
        self.frame_q = np.zeros((0, 4))
        self.frame_t = np.zeros((0, 3))
        self.frame_free = np.zeros(0, dtype=bool)

        # scene_transform parameters (poses of all frames stored as coarse;
        # merge frames are mapped through the transform, reference fixed)
        self.tf_q = np.array([1.0, 0.0, 0.0, 0.0])
        self.tf_t = np.zeros(3)
        self.tf_scale = 1.0
        self.tf_optimize_scale = False
        self.frame_is_merge = np.zeros(0, dtype=bool)

        # points
        self.point_ids: list[int] = []
        self.X = np.zeros((0, 3))

        # observations
        self.obs_uv = np.zeros((0, 2))
        self.obs_point = np.zeros(0, dtype=int)
        self.obs_cam = np.zeros(0, dtype=int)
        self.obs_unit = np.zeros(0, dtype=int)
        self.obs_frame = np.zeros(0, dtype=int)

        # gauge bookkeeping for global camera-set solves
        self.gauge_baseline: Optional[tuple[int, int, float]] = None

        self._offsets_ready = False

    # -- block accounting ----------------------------------------------------

    @property
    def num_pose_blocks(self) -> int:
        if self.mode == "camera_set":
            return len(self.unit_ids) + len(self.camera_ids)
        if self.mode == "per_image":
            return len(self.frame_ids)
        return 1

    @property
    def num_free_pose_blocks(self) -> int:
        if self.mode == "camera_set":
            return int(self.unit_free.sum()) + int(self.rel_free.sum())
        if self.mode == "per_image":
            return int(self.frame_free.sum())
        return 1

    @property
    def num_free_camera_dofs(self) -> int:
        self._build_offsets()
        return self._num_cam_dofs

    @property
    def num_residuals(self) -> int:
        return len(self.obs_uv)

    @property
    def num_points(self) -> int:
        return len(self.point_ids)

    def _build_offsets(self):
        if self._offsets_ready:
            return
        offset = 0

        def alloc(free_mask, dim):
            nonlocal offset
            cols = np.full(len(free_mask), -1, dtype=int)
            for i, free in enumerate(free_mask):
                if free:
                    cols[i] = offset
                    offset += dim
            return cols

        if self.mode == "camera_set":
            self._unit_cols = alloc(self.unit_free, 6)
            self._rel_cols = alloc(self.rel_free, 6)
            self._intr_cols = alloc(self.intr_free, 6)
        elif self.mode == "per_image":
            self._frame_cols = alloc(self.frame_free, 6)
            self._intr_cols = alloc(self.intr_free, 6)
        else:
            self._tf_dim = 7 if self.tf_optimize_scale else 6
            offset = self._tf_dim
        self._num_cam_dofs = offset
        self._offsets_ready = True

    # -- parameter snapshots ---------------------------------------------------

    def snapshot(self):
        return (
            self.unit_q.copy(), self.unit_t.copy(),
            self.rel_q.copy(), self.rel_t.copy(), self.intr.copy(),
            self.frame_q.copy(), self.frame_t.copy(),
            self.tf_q.copy(), self.tf_t.copy(), self.tf_scale,
            self.X.copy(),
        )

    def restore(self, snap):
        (self.unit_q, self.unit_t, self.rel_q, self.rel_t, self.intr,
         self.frame_q, self.frame_t, self.tf_q, self.tf_t, self.tf_scale,
         self.X) = (
            snap[0].copy(), snap[1].copy(), snap[2].copy(), snap[3].copy(),
            snap[4].copy(), snap[5].copy(), snap[6].copy(), snap[7].copy(),
            snap[8].copy(), snap[9], snap[10].copy())

    # -- evaluation ------------------------------------------------------------

    def camera_frame_points(self) -> np.ndarray:
        """Camera-frame coordinates Y of every observation's point."""
        Xo = self.X[self.obs_point]
        if self.mode == "camera_set":
            Ru = quats_to_matrices(self.unit_q)[self.obs_unit]
            Rr = quats_to_matrices(self.rel_q)[self.obs_cam]
            Z = np.einsum("mij,mj->mi", Ru, Xo - self.unit_t[self.obs_unit])
            return np.einsum("mij,mj->mi", Rr, Z - self.rel_t[self.obs_cam])
        if self.mode == "per_image":
            Rf = quats_to_matrices(self.frame_q)[self.obs_frame]
            return np.einsum("mij,mj->mi", Rf, Xo - self.frame_t[self.obs_frame])
        # scene_transform: merge frames see points pulled back through T
        Rf = quats_to_matrices(self.frame_q)[self.obs_frame]
        RT = quats_to_matrices(self.tf_q[None])[0]
        merge = self.frame_is_merge[self.obs_frame]
        local = Xo.copy()
        pulled = (Xo - self.tf_t) @ RT / self.tf_scale
        local[merge] = pulled[merge]
        return np.einsum("mij,mj->mi", Rf, local - self.frame_t[self.obs_frame])

    def residuals(self) -> tuple[np.ndarray, np.ndarray]:
        """(residuals e = proj - obs, valid mask). Invalid rows are zeroed."""
        Y = self.camera_frame_points()
        uv, _, valid = project_with_jacobians(self.intr[self.obs_cam], Y)
        e = uv - self.obs_uv
        e[~valid] = 0.0
        return e, valid

    def cost(self) -> float:
        e, _ = self.residuals()
        s = np.sum(e * e, axis=1)
        return float(np.sum(self.loss.rho(s)))

    def parameters_finite(self) -> bool:
        arrays = (self.unit_q, self.unit_t, self.rel_q, self.rel_t, self.intr,
                  self.frame_q, self.frame_t, self.tf_q, self.tf_t, self.X,
                  self.obs_uv)
        return all(np.all(np.isfinite(a)) for a in arrays if a.size)

    def evaluate(self):
        """Residuals plus camera-side and point Jacobian blocks."""
        self._build_offsets()
        Xo = self.X[self.obs_point]
        Kobs = self.intr[self.obs_cam]
        blocks: list[_CamBlock] = []

        if self.mode == "camera_set":
            Ru = quats_to_matrices(self.unit_q)[self.obs_unit]
            Rr = quats_to_matrices(self.rel_q)[self.obs_cam]
            Z = np.einsum("mij,mj->mi", Ru, Xo - self.unit_t[self.obs_unit])
            Y = np.einsum("mij,mj->mi", Rr, Z - self.rel_t[self.obs_cam])
            uv, J_Y, J_K, valid = project_with_jacobians(Kobs, Y, want_intrinsics=True)
            JRr = np.einsum("mij,mjk->mik", J_Y, Rr)
            JRrRu = np.einsum("mij,mjk->mik", JRr, Ru)
            if self.unit_free.any():
                J_unit = np.concatenate([
                    -np.einsum("mij,mjk->mik", JRr, skew_batch(Z)),
                    -JRrRu,
                ], axis=2)
                blocks.append(_CamBlock(J_unit, self._unit_cols[self.obs_unit], 6))
            if self.rel_free.any():
                J_rel = np.concatenate([
                    -np.einsum("mij,mjk->mik", J_Y, skew_batch(Y)),
                    -JRr,
                ], axis=2)
                blocks.append(_CamBlock(J_rel, self._rel_cols[self.obs_cam], 6))
            if self.intr_free.any():
                blocks.append(_CamBlock(J_K, self._intr_cols[self.obs_cam], 6))
            J_point = JRrRu
        elif self.mode == "per_image":
            Rf = quats_to_matrices(self.frame_q)[self.obs_frame]
            Y = np.einsum("mij,mj->mi", Rf, Xo - self.frame_t[self.obs_frame])
            uv, J_Y, J_K, valid = project_with_jacobians(Kobs, Y, want_intrinsics=True)
            JRf = np.einsum("mij,mjk->mik", J_Y, Rf)
            if self.frame_free.any():
                J_frame = np.concatenate([
                    -np.einsum("mij,mjk->mik", J_Y, skew_batch(Y)),
                    -JRf,
                ], axis=2)
                blocks.append(_CamBlock(J_frame, self._frame_cols[self.obs_frame], 6))
            if self.intr_free.any():
                blocks.append(_CamBlock(J_K, self._intr_cols[self.obs_cam], 6))
            J_point = JRf
        else:
            Rf = quats_to_matrices(self.frame_q)[self.obs_frame]
            RT = quats_to_matrices(self.tf_q[None])[0]
            merge = self.frame_is_merge[self.obs_frame]
            offset = Xo - self.tf_t
            pulled = offset @ RT / self.tf_scale
            local = Xo.copy()
            local[merge] = pulled[merge]
            Y = np.einsum("mij,mj->mi", Rf, local - self.frame_t[self.obs_frame])
            uv, J_Y, J_K, valid = project_with_jacobians(Kobs, Y, want_intrinsics=True)
            JRf = np.einsum("mij,mjk->mik", J_Y, Rf)
            JRfRT = np.einsum("mij,jk->mik", JRf, RT.T) / self.tf_scale
            dim = self._tf_dim
            J_tf = np.zeros((len(Y), 2, dim))
            J_tf[:, :, 0:3] = np.einsum("mij,mjk->mik", JRfRT, skew_batch(offset))
            J_tf[:, :, 3:6] = -JRfRT
            if self.tf_optimize_scale:
                J_tf[:, :, 6] = -np.einsum("mij,mj->mi", JRf, pulled) / self.tf_scale
            J_tf[~merge] = 0.0
            cols = np.where(merge, 0, -1)
            blocks.append(_CamBlock(J_tf, cols, dim))
            J_point = JRf.copy()
            J_point[merge] = JRfRT[merge]

        e = uv - self.obs_uv
        e[~valid] = 0.0
        J_point[~valid] = 0.0
        for blk in blocks:
            blk.jac[~valid] = 0.0
        return e, blocks, J_point

    # -- updates ---------------------------------------------------------------

    def apply_step(self, delta_cam: np.ndarray, delta_points: np.ndarray) -> None:
        self._build_offsets()

        def update_pose(q_arr, t_arr, idx, base):
            dq = quat_from_rotvec(delta_cam[base:base + 3])
            q_arr[idx] = quat_multiply(dq, q_arr[idx])
            q_arr[idx] /= np.linalg.norm(q_arr[idx])
            t_arr[idx] += delta_cam[base + 3:base + 6]

        if self.mode == "camera_set":
            for i, col in enumerate(self._unit_cols):
                if col >= 0:
                    update_pose(self.unit_q, self.unit_t, i, col)
            for i, col in enumerate(self._rel_cols):
                if col >= 0:
                    update_pose(self.rel_q, self.rel_t, i, col)
            for i, col in enumerate(self._intr_cols):
                if col >= 0:
                    self.intr[i] += delta_cam[col:col + 6]
        elif self.mode == "per_image":
            for i, col in enumerate(self._frame_cols):
                if col >= 0:
                    update_pose(self.frame_q, self.frame_t, i, col)
            for i, col in enumerate(self._intr_cols):
                if col >= 0:
                    self.intr[i] += delta_cam[col:col + 6]
        else:
            dq = quat_from_rotvec(delta_cam[0:3])
            self.tf_q = quat_multiply(dq, self.tf_q)
            self.tf_q /= np.linalg.norm(self.tf_q)
            self.tf_t = self.tf_t + delta_cam[3:6]
            if self.tf_optimize_scale:
                self.tf_scale = max(self.tf_scale + delta_cam[6], 1e-9)
        if len(delta_points):
            self.X += delta_points

    def apply_gauge_rescale(self) -> float:
        """Restore the recorded baseline length after a global solve.

        Scales unit origins and points about the anchor unit origin and the
        relative-pose origins with them, which leaves every reprojection
        unchanged while pinning the scene scale.  Returns the factor used.
        """
        if self.gauge_baseline is None:
            return 1.0
        i0, i1, pre_len = self.gauge_baseline
        cur = float(np.linalg.norm(self.unit_t[i1] - self.unit_t[i0]))
        if cur < 1e-12:
            return 1.0
        s = pre_len / cur
        anchor = self.unit_t[i0].copy()
        self.unit_t = anchor + s * (self.unit_t - anchor)
        self.X = anchor + s * (self.X - anchor)
        self.rel_t = s * self.rel_t
        return s

    # -- write-back --------------------------------------------------------------

    def update_reconstruction(self, recon: Reconstruction) -> None:
        from .geometry import CameraIntrinsics

        for i, pid in enumerate(self.point_ids):
            recon.points[pid].position = self.X[i].copy()
        if self.mode == "camera_set":
            for i, uid in enumerate(self.unit_ids):
                recon.units[uid].pose = Pose(self.unit_q[i], self.unit_t[i])
            for i, cid in enumerate(self.camera_ids):
                cam = recon.camera(cid)
                if self.rel_free[i]:
                    cam.relative = RelativePose(self.rel_q[i], self.rel_t[i])
                if self.intr_free[i]:
                    cam.intrinsics = CameraIntrinsics(*self.intr[i])
        elif self.mode == "per_image":
            for i, fid in enumerate(self.frame_ids):
                if self.frame_free[i]:
                    recon.frames[fid].pose_override = Pose(self.frame_q[i], self.frame_t[i])
            for i, cid in enumerate(self.camera_ids):
                if self.intr_free[i]:
                    recon.camera(cid).intrinsics = CameraIntrinsics(*self.intr[i])

    def transform_result(self) -> SceneTransform:
        if self.mode != "scene_transform":
            raise ValueError("transform_result only applies to scene_transform problems")
        return SceneTransform(self.tf_q, self.tf_t, self.tf_scale)

    # -- gauge structure ---------------------------------------------------------

    def gauge_generators(self) -> np.ndarray:
        """Orthonormal basis of the cost-invariant directions of this problem.

        Columns live in the solver's step space (free camera dofs followed by
        point dofs).  Candidate families: a world similarity (rotation,
        translation, scale) and, for camera-set problems, the rig-frame
        change that recomposes every relative pose against the opposite
        motion of every unit.  Directions that would move a fixed block are
        removed by intersecting with the frozen-coordinate kernel, so the
        returned basis spans exactly the reduced problem's null space.
        """
        self._build_offsets()
        if self.mode == "scene_transform":
            return np.zeros((self._num_cam_dofs + 3 * self.num_points, 0))

        P = self.num_points
        if self.mode == "camera_set":
            U, K = len(self.unit_ids), len(self.camera_ids)
            Ru = quats_to_matrices(self.unit_q)
            Rr = quats_to_matrices(self.rel_q)
            n_gen = 13
            gen_unit = np.zeros((n_gen, U, 6))
            gen_rel = np.zeros((n_gen, K, 6))
            gen_pts = np.zeros((n_gen, P, 3))
            for a in range(3):
                e = np.zeros(3)
                e[a] = 1.0
                # world rotation
                gen_unit[a, :, 0:3] = -Ru @ e
                gen_unit[a, :, 3:6] = np.cross(e, self.unit_t)
                if P:
                    gen_pts[a] = np.cross(e, self.X)
                # world translation
                gen_unit[3 + a, :, 3 + a] = 1.0
                if P:
                    gen_pts[3 + a, :, a] = 1.0
                # rig-frame rotation
                gen_rel[7 + a, :, 0:3] = Rr @ e
                gen_rel[7 + a, :, 3:6] = -np.cross(e, self.rel_t)
                gen_unit[7 + a, :, a] = -1.0
                # rig-frame translation
                gen_rel[10 + a, :, 3 + a] = 1.0
                gen_unit[10 + a, :, 3:6] = -np.einsum("uij,j->ui", np.transpose(Ru, (0, 2, 1)), e)
            # scale
            gen_unit[6, :, 3:6] = self.unit_t
            gen_rel[6, :, 3:6] = self.rel_t
            if P:
                gen_pts[6] = self.X

            frozen_rows = []
            free_rows = []
            col_of_unit = self._unit_cols
            col_of_rel = self._rel_cols
            for i in range(U):
                block = gen_unit[:, i, :]
                if col_of_unit[i] < 0:
                    frozen_rows.append(block)
                else:
                    free_rows.append((col_of_unit[i], block))
            for i in range(K):
                block = gen_rel[:, i, :]
                if col_of_rel[i] < 0:
                    frozen_rows.append(block)
                else:
                    free_rows.append((col_of_rel[i], block))
        else:  # per_image
            F = len(self.frame_ids)
            Rf = quats_to_matrices(self.frame_q)
            n_gen = 7
            gen_frame = np.zeros((n_gen, F, 6))
            gen_pts = np.zeros((n_gen, P, 3))
            for a in range(3):
                e = np.zeros(3)
                e[a] = 1.0
                gen_frame[a, :, 0:3] = -Rf @ e
                gen_frame[a, :, 3:6] = np.cross(e, self.frame_t)
                if P:
                    gen_pts[a] = np.cross(e, self.X)
                gen_frame[3 + a, :, 3 + a] = 1.0
                if P:
                    gen_pts[3 + a, :, a] = 1.0
            gen_frame[6, :, 3:6] = self.frame_t
            if P:
                gen_pts[6] = self.X
            frozen_rows = []
            free_rows = []
            for i in range(F):
                block = gen_frame[:, i, :]
                if self._frame_cols[i] < 0:
                    frozen_rows.append(block)
                else:
                    free_rows.append((self._frame_cols[i], block))

        # intersect with the kernel of the frozen coordinates: keep only the
        # generator combinations that leave every frozen block untouched
        if frozen_rows:
            C = np.concatenate([b.reshape(n_gen, -1) for b in frozen_rows], axis=1)
            Uc, s, _ = np.linalg.svd(C, full_matrices=True)
            rank = int(np.sum(s > 1e-9 * max(s[0] if len(s) else 1.0, 1.0)))
            Kn = Uc[:, rank:]  # (n_gen, n_null)
        else:
            Kn = np.eye(n_gen)
        if Kn.shape[1] == 0:
            return np.zeros((self._num_cam_dofs + 3 * P, 0))

        n_cols = Kn.shape[1]
        N = np.zeros((self._num_cam_dofs + 3 * P, n_cols))
        for col, block in free_rows:
            N[col:col + 6, :] += block.T @ Kn
        if P:
            N[self._num_cam_dofs:, :] = gen_pts.reshape(n_gen, -1).T @ Kn
        # orthonormalize and drop numerically dependent columns
        Q, R = np.linalg.qr(N)
        keep = np.abs(np.diag(R)) > 1e-9 * max(1.0, float(np.abs(np.diag(R)).max(initial=0.0)))
        return Q[:, keep]


# ---------------------------------------------------------------------------
# problem builders
# ---------------------------------------------------------------------------

def _point_observations(recon: Reconstruction, point_ids):
    """Flatten tracks of the chosen points into parallel observation arrays."""
    rows_uv, rows_point, rows_cam, rows_unit, rows_frame = [], [], [], [], []
    frame_index: dict[int, int] = {}
    frame_order: list[int] = []
    for pi, pid in enumerate(point_ids):
        for frame_id, obs_idx in recon.points[pid].track:
            frame = recon.frames[frame_id]
            if not frame.registered:
                continue
            if frame_id not in frame_index:
                frame_index[frame_id] = len(frame_order)
                frame_order.append(frame_id)
            rows_uv.append(frame.observations[obs_idx].pixel)
            rows_point.append(pi)
            rows_cam.append(frame.camera_id)
            rows_unit.append(frame.unit_id)
            rows_frame.append(frame_index[frame_id])
    return (
        np.array(rows_uv, dtype=float).reshape(-1, 2),
        np.array(rows_point, dtype=int),
        np.array(rows_cam, dtype=int),
        np.array(rows_unit, dtype=int),
        np.array(rows_frame, dtype=int),
        frame_order,
    )


def _fill_rig(problem: BAProblem, recon: Reconstruction) -> dict[int, int]:
    problem.camera_ids = [cam.camera_id for cam in recon.rig]
    problem.rel_q = np.stack([cam.relative.q for cam in recon.rig])
    problem.rel_t = np.stack([cam.relative.t for cam in recon.rig])
    problem.intr = np.stack([cam.intrinsics.as_array() for cam in recon.rig])
    return {cid: i for i, cid in enumerate(problem.camera_ids)}


def _csba_problem(recon: Reconstruction, loss: RobustLoss, unit_ids, free_units,
                  point_ids, rig_free: bool) -> BAProblem:
    problem = BAProblem("camera_set", loss)
    cam_index = _fill_rig(problem, recon)
    problem.rel_free = np.full(len(problem.camera_ids), rig_free)
    problem.intr_free = np.full(len(problem.camera_ids), rig_free)

    problem.unit_ids = list(unit_ids)
    unit_index = {uid: i for i, uid in enumerate(problem.unit_ids)}
    problem.unit_q = np.stack([recon.units[u].pose.q for u in problem.unit_ids])
    problem.unit_t = np.stack([recon.units[u].pose.t for u in problem.unit_ids])
    problem.unit_free = np.array([u in free_units for u in problem.unit_ids])

    problem.point_ids = list(point_ids)
    problem.X = (np.stack([recon.points[p].position for p in problem.point_ids])
                 if problem.point_ids else np.zeros((0, 3)))
    uv, pts, cams, units, _, _ = _point_observations(recon, problem.point_ids)
    problem.obs_uv = uv
    problem.obs_point = pts
    problem.obs_cam = np.array([cam_index[c] for c in cams], dtype=int)
    problem.obs_unit = np.array([unit_index[u] for u in units], dtype=int)
    return problem


def build_local_csba(recon: Reconstruction, seed_unit_ids,
                     loss: RobustLoss = RobustLoss("cauchy", 1.0),
                     min_shared: int = 20) -> BAProblem:
    """Local camera-set BA around newly registered units.

    Frees the seed units plus every registered unit sharing at least
    ``min_shared`` track observations with a seed, and the points observed by
    those units; relative poses and intrinsics stay fixed.  Other units keep
    their poses and anchor the free points through their observations.
    """
    seeds = set(seed_unit_ids)
    if not seeds:
        raise ValueError("local camera-set BA requires at least one seed unit")
    for uid in seeds:
        if not recon.units[uid].registered:
            raise ValueError(f"seed unit {uid} is not registered")

    unit_of_frame = {fid: f.unit_id for fid, f in recon.frames.items()}
    shared: dict[int, int] = {}
    seed_points: set[int] = set()
    for pid, point in recon.points.items():
        track_units = {unit_of_frame[fid] for fid, _ in point.track}
        if track_units & seeds:
            seed_points.add(pid)
            for uid in track_units - seeds:
                shared[uid] = shared.get(uid, 0) + 1
    free_units = seeds | {uid for uid, n in shared.items()
                          if n >= min_shared and recon.units[uid].registered}

    free_points = set(seed_points)
    for pid, point in recon.points.items():
        if pid in free_points:
            continue
        if any(unit_of_frame[fid] in free_units for fid, _ in point.track):
            free_points.add(pid)

    unit_ids = sorted(u.unit_id for u in recon.registered_units())
    return _csba_problem(recon, loss, unit_ids, free_units,
                         sorted(free_points), rig_free=False)


def build_global_csba(recon: Reconstruction,
                      loss: RobustLoss = RobustLoss("cauchy", 1.0),
                      free_rig: bool = True,
                      free_intrinsics: Optional[bool] = None) -> BAProblem:
    """Global camera-set BA: every unit pose, relative pose, intrinsics, and
    point is free; gauge is fixed by freezing the lowest-id registered unit
    and restoring the first inter-unit baseline length after the solve.

    ``free_rig=False`` keeps the relative poses and intrinsics at their
    current values while still freeing every unit pose and point: on
    under-determined models (few registered units) a fully free rig absorbs
    prior misfit, and with the rig held the rig geometry itself anchors the
    scene scale, so no baseline rescale is needed.  ``free_intrinsics``
    (default: same as ``free_rig``) can hold the intrinsics while the
    relative poses refine, which conditions recalibration on narrow-FOV
    scenes where a common pitch trades against focal length and principal
    point.
    """
    unit_ids = sorted(u.unit_id for u in recon.registered_units())
    if not unit_ids:
        raise ValueError("global camera-set BA requires registered units")
    free_units = set(unit_ids[1:])
    problem = _csba_problem(recon, loss, unit_ids, free_units,
                            sorted(recon.points), rig_free=free_rig)
    if free_intrinsics is not None:
        problem.intr_free[:] = free_intrinsics
    if free_rig and len(unit_ids) >= 2:
        pre = float(np.linalg.norm(problem.unit_t[1] - problem.unit_t[0]))
        if pre > 1e-9:
            problem.gauge_baseline = (0, 1, pre)
    return problem


def build_traditional_ba(recon: Reconstruction,
                         loss: RobustLoss = RobustLoss("cauchy", 1.0),
                         free_intrinsics: bool = False) -> BAProblem:
    """Per-image baseline: one free pose block per registered image.

    No rigidity constraint relates frames of one unit, so k x n pose blocks
    are optimized where camera-set BA would expose k + n.
    """
    problem = BAProblem("per_image", loss)
    cam_index = _fill_rig(problem, recon)
    problem.intr_free = np.full(len(problem.camera_ids), free_intrinsics)
    problem.rel_free = np.zeros(len(problem.camera_ids), dtype=bool)

    point_ids = sorted(recon.points)
    problem.point_ids = point_ids
    problem.X = (np.stack([recon.points[p].position for p in point_ids])
                 if point_ids else np.zeros((0, 3)))
    uv, pts, cams, _, frames_idx, frame_order = _point_observations(recon, point_ids)
    # every registered image owns a pose block, observed or not (k x n blocks)
    frame_order = list(frame_order)
    seen = set(frame_order)
    for fid in sorted(recon.frames):
        if recon.frames[fid].registered and fid not in seen:
            frame_order.append(fid)
    problem.obs_uv = uv
    problem.obs_point = pts
    problem.obs_cam = np.array([cam_index[c] for c in cams], dtype=int)
    problem.obs_frame = frames_idx
    problem.frame_ids = frame_order
    poses = [recon.frame_pose(fid) for fid in frame_order]
    problem.frame_q = (np.stack([p.q for p in poses])
                       if poses else np.zeros((0, 4)))
    problem.frame_t = (np.stack([p.t for p in poses])
                       if poses else np.zeros((0, 3)))
    problem.frame_free = np.ones(len(frame_order), dtype=bool)
    return problem


def choose_ba_scope(units_since_global: int, total_registered: int,
                    ratio: float = 0.1, cap: int = 25) -> str:
    """"global" when enough units registered since the last global pass."""
    if total_registered <= 0:
        return "local"
    if units_since_global >= cap:
        return "global"
    return "global" if units_since_global / total_registered >= ratio else "local"


def filter_after_ba(recon: Reconstruction, max_error_px: float = 4.0,
                    min_angle_deg: float = 1.5) -> tuple[int, int]:
    """Drop observations over the error cap, then under-supported points.

    Returns (observations removed, points deleted).  A point dies when its
    track falls below two observations or its triangulation angle falls
    below the minimum.
    """
    from .reproj import project_with_jacobians
    from .triangulate import _max_pairwise_angle_deg

    # one pass of vectorized reprojection over every track observation
    frame_ids = []
    frame_index: dict[int, int] = {}
    mats, origins, cam_rows = [], [], []
    cam_index = {cam.camera_id: i for i, cam in enumerate(recon.rig)}
    K_cam = np.stack([cam.intrinsics.as_array() for cam in recon.rig])
    for fid in recon.frames:
        pose = recon.frame_pose(fid)
        if pose is not None:
            frame_index[fid] = len(frame_ids)
            frame_ids.append(fid)
            mats.append(pose.rotation)
            origins.append(pose.t)
            cam_rows.append(cam_index[recon.frames[fid].camera_id])
    if not frame_ids:
        return 0, 0
    R_f = np.stack(mats)
    t_f = np.stack(origins)
    cam_f = np.array(cam_rows)

    pids = sorted(recon.points)
    pt_rows, frame_rows, uv_rows = [], [], []
    for ai, pid in enumerate(pids):
        for frame_id, obs_idx in recon.points[pid].track:
            pt_rows.append(ai)
            frame_rows.append(frame_index[frame_id])
            px = recon.frames[frame_id].observations[obs_idx].pixel
            uv_rows.append((px[0], px[1]))
    obs_removed = 0
    points_removed = 0
    if not pt_rows:
        return 0, 0
    Xp = np.stack([recon.points[pid].position for pid in pids])
    pt_idx = np.array(pt_rows)
    frame_row = np.array(frame_rows)
    R = R_f[frame_row]
    t = t_f[frame_row]
    K = K_cam[cam_f[frame_row]]
    uv_obs = np.array(uv_rows)
    Y = np.einsum("mij,mj->mi", R, Xp[pt_idx] - t)
    uv, _, valid = project_with_jacobians(K, Y)
    err = np.linalg.norm(uv - uv_obs, axis=1)
    err[~valid] = np.inf

    cursor = 0
    for ai, pid in enumerate(pids):
        point = recon.points[pid]
        n = len(point.track)
        errs = err[cursor:cursor + n]
        cursor += n
        kept = []
        kept_err = []
        for (frame_id, obs_idx), e in zip(point.track, errs):
            if e > max_error_px:
                recon.frames[frame_id].observations[obs_idx].track_id = None
                obs_removed += 1
            else:
                kept.append((frame_id, obs_idx))
                kept_err.append(float(e))
        point.track = kept
        if len(kept) < 2:
            recon.remove_point(pid)
            points_removed += 1
            continue
        centers = t_f[[frame_index[fid] for fid, _ in kept]]
        if _max_pairwise_angle_deg(point.position, centers) < min_angle_deg:
            recon.remove_point(pid)
            points_removed += 1
            continue
        point.error = float(np.mean(kept_err))
    return obs_removed, points_removed
