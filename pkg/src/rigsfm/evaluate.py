"""Trajectory evaluation: absolute pose errors after rigid/sim3 alignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

from .geometry import Pose, SceneTransform, matrix_to_quat, rotation_geodesic

__all__ = ["EvalReport", "align_umeyama", "evaluate", "match_by_timestamp"]


@dataclass
class EvalReport:
    median_rotation_deg: float
    median_translation_m: float
    rmse_translation_m: float
    per_unit: list[tuple[Hashable, float, float]] = field(default_factory=list)
    alignment: SceneTransform = field(default_factory=SceneTransform.identity)
    num_units: int = 0

    @property
    def max_rotation_deg(self) -> float:
        return max((r for _, r, _ in self.per_unit), default=0.0)

    @property
    def max_translation_m(self) -> float:
        return max((t for _, _, t in self.per_unit), default=0.0)


def align_umeyama(src: np.ndarray, dst: np.ndarray,
                  with_scale: bool = False) -> SceneTransform:
    """Least-squares rigid (optionally similarity) map with T(src) ~= dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("align_umeyama expects matching (N, 3) arrays")
    if len(src) < 2:
        raise ValueError("alignment needs at least 2 points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    S = src - mu_s
    D = dst - mu_d
    H = D.T @ S / len(src)
    U, sig, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    fix = np.diag([1.0, 1.0, d])
    R = U @ fix @ Vt
    if with_scale:
        var_s = float(np.sum(S * S)) / len(src)
        scale = float(np.trace(np.diag(sig) @ fix)) / max(var_s, 1e-18)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return SceneTransform(matrix_to_quat(R), t, scale)


def evaluate(
    estimated: Mapping[Hashable, Pose],
    reference: Mapping[Hashable, Pose],
    align: str = "rigid",
) -> EvalReport:
    """Absolute pose errors of an estimated trajectory against a reference.

    Aligns the estimated unit origins to the reference by least squares
    (``rigid``, ``sim3``, or ``none``), then reports the median rotation
    geodesic and translation errors per common unit plus the translation
    RMSE.  Raises ValueError with fewer than two common units.
    """
    common = sorted(set(estimated) & set(reference))
    if len(common) < 2:
        raise ValueError(f"need at least 2 common units, got {len(common)}")
    est_t = np.stack([estimated[k].t for k in common])
    ref_t = np.stack([reference[k].t for k in common])
    if align == "none":
        T = SceneTransform.identity()
    elif align in ("rigid", "sim3"):
        T = align_umeyama(est_t, ref_t, with_scale=(align == "sim3"))
    else:
        raise ValueError(f"unknown alignment mode {align!r}")

    per_unit = []
    for k in common:
        p = T.apply_pose(estimated[k])
        rot = rotation_geodesic(p.q, reference[k].q)
        trans = float(np.linalg.norm(p.t - reference[k].t))
        per_unit.append((k, rot, trans))
    rots = np.array([r for _, r, _ in per_unit])
    trans = np.array([t for _, _, t in per_unit])
    return EvalReport(
        median_rotation_deg=float(np.median(rots)),
        median_translation_m=float(np.median(trans)),
        rmse_translation_m=float(np.sqrt(np.mean(trans * trans))),
        per_unit=per_unit,
        alignment=T,
        num_units=len(common),
    )


def match_by_timestamp(
    estimated: list[tuple[float, Pose]],
    reference: list[tuple[float, Pose]],
    tolerance: float = 1e-6,
) -> tuple[dict[float, Pose], dict[float, Pose]]:
    """Pair trajectory entries whose timestamps agree within a tolerance."""
    est_map: dict[float, Pose] = {}
    ref_map: dict[float, Pose] = {}
    ref_sorted = sorted(reference, key=lambda e: e[0])
    ref_ts = np.array([ts for ts, _ in ref_sorted])
    for ts, pose in estimated:
        idx = int(np.searchsorted(ref_ts, ts))
        for j in (idx - 1, idx):
            if 0 <= j < len(ref_ts) and abs(ref_ts[j] - ts) <= tolerance:
                key = float(ref_ts[j])
                est_map[key] = pose
                ref_map[key] = ref_sorted[j][1]
                break
    return est_map, ref_map
