"""Correspondence ingest: pair selection, semantic filtering, verification.

Feature extraction and matching are upstream concerns; this module consumes
their output from files, keeps only image pairs whose prior frustums overlap,
drops cross-class and dynamic-class matches, verifies the survivors with an
essential-matrix RANSAC, and merges verified inlier matches into tracks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import PipelineConfig
from .errors import ReferentialIntegrityError
from .essential import essential_ransac
from .formats import (
    CorrespondenceData,
    LabelTable,
    read_correspondences,
    read_labels,
    read_priors,
    read_rig,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    camera_from_unit,
    quats_to_matrices,
    undistort_normalized,
)
from .model import Frame, RigCamera

logger = logging.getLogger(__name__)

__all__ = [
    "MatchPair",
    "CorrespondenceGraph",
    "SceneInputs",
    "load_inputs",
    "select_pairs",
    "filter_semantic",
    "verify_pair",
    "normalized_coords",
]


@dataclass
class MatchPair:
    """Feature matches between a canonically ordered frame pair."""

    frame_a: int
    frame_b: int
    matches: list[tuple[int, int]] = field(default_factory=list)
    verified: bool = False
    inlier_mask: Optional[np.ndarray] = None
    reason: str = ""

    def __post_init__(self):
        if self.frame_a >= self.frame_b:
            raise ValueError("MatchPair requires frame_a < frame_b")
        if len(set(self.matches)) != len(self.matches):
            raise ValueError("duplicate match entries")

    def inlier_matches(self) -> list[tuple[int, int]]:
        if not self.verified or self.inlier_mask is None:
            return []
        return [m for m, keep in zip(self.matches, self.inlier_mask) if keep]


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        parent = self.parent
        if x not in parent:
            parent[x] = x
            return x
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra
        return ra


class CorrespondenceGraph:
    """Verified pairwise matches merged into feature tracks.

    Track nodes are (frame_id, observation index) pairs.  A union that would
    put two observations of the same frame into one track is rejected, which
    keeps every track frame-unique; merging is idempotent.
    """

    def __init__(self):
        self.pairs: dict[tuple[int, int], MatchPair] = {}
        self._uf = _UnionFind()
        self._root_frames: dict = {}  # root -> {frame_id: (frame_id, obs_idx)}

    def add_pair(self, pair: MatchPair) -> None:
        self.pairs[(pair.frame_a, pair.frame_b)] = pair

    def merge_tracks_from(self, pair: MatchPair) -> None:
        """Union the verified inlier matches of a pair into the track forest."""
        for ia, ib in pair.inlier_matches():
            self._merge((pair.frame_a, ia), (pair.frame_b, ib))

    def merge_nodes(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        """Union two observation nodes directly; False if it would put two
        observations of one frame in the same track."""
        return self._merge(a, b)

    def _node_frames(self, root):
        if root not in self._root_frames:
            node = root
            self._root_frames[root] = {node[0]: node}
        return self._root_frames[root]

    def _merge(self, na, nb) -> bool:
        ra, rb = self._uf.find(na), self._uf.find(nb)
        if ra == rb:
            return True
        fa, fb = self._node_frames(ra), self._node_frames(rb)
        conflicts = set(fa) & set(fb)
        # allow only unions that keep at most one observation per frame
        if any(fa[f] != fb[f] for f in conflicts):
            return False
        root = self._uf.union(ra, rb)
        merged = dict(fa)
        merged.update(fb)
        self._root_frames[root] = merged
        other = rb if root == ra else ra
        self._root_frames.pop(other, None)
        return True

    def track_of(self, frame_id: int, obs_idx: int) -> list[tuple[int, int]]:
        root = self._uf.find((frame_id, obs_idx))
        return sorted(self._node_frames(root).values())

    def tracks(self) -> list[list[tuple[int, int]]]:
        """All tracks (size >= 2), sorted for determinism."""
        roots: dict = {}
        for node in self._uf.parent:
            roots.setdefault(self._uf.find(node), []).append(node)
        out = [sorted(nodes) for nodes in roots.values() if len(nodes) >= 2]
        out.sort()
        return out

    def build_index(self) -> "TrackIndex":
        return TrackIndex(self.tracks())


class TrackIndex:
    """Static track list plus the live link from tracks to scene points.

    Point ids are never reused, so a mapped id that has left the
    reconstruction marks the track as consumed (it is not retriangulated).
    """

    def __init__(self, tracks: list[list[tuple[int, int]]]):
        self.tracks = tracks
        self.node_to_track: dict[tuple[int, int], int] = {}
        self.tracks_by_frame: dict[int, list[int]] = {}
        for ti, track in enumerate(tracks):
            for node in track:
                self.node_to_track[node] = ti
                self.tracks_by_frame.setdefault(node[0], []).append(ti)
        self.point_of: dict[int, int] = {}

    def track_of(self, frame_id: int, obs_idx: int) -> Optional[int]:
        return self.node_to_track.get((frame_id, obs_idx))

    def live_point(self, recon, frame_id: int, obs_idx: int) -> Optional[int]:
        """Scene point currently backing this observation's track, if any."""
        ti = self.node_to_track.get((frame_id, obs_idx))
        if ti is None:
            return None
        pid = self.point_of.get(ti)
        if pid is None or pid not in recon.points:
            return None
        return pid

    def status(self, recon, track_index: int) -> str:
        """"unmapped", "live", or "consumed" (point existed but was removed).

        Consumed tracks may be retriangulated once poses improve; callers
        decide.
        """
        pid = self.point_of.get(track_index)
        if pid is None:
            return "unmapped"
        return "live" if pid in recon.points else "consumed"


@dataclass
class SceneInputs:
    """Everything one scene directory provides to the pipeline."""

    graph: CorrespondenceGraph
    frames: dict[int, Frame]
    priors: dict[int, tuple[float, Pose]]
    rig: list[RigCamera]
    labels: LabelTable
    raw: CorrespondenceData


def load_inputs(
    correspondence_path: str | Path,
    priors_path: str | Path,
    rig_path: str | Path,
    labels_path: str | Path,
) -> SceneInputs:
    """Load and cross-check the four scene input files.

    The returned graph holds one unverified MatchPair per pair block; tracks
    are built later, after verification.  Raises ParseError on malformed
    files and ReferentialIntegrityError on dangling references.
    """
    raw = read_correspondences(correspondence_path)
    priors = read_priors(priors_path)
    rig = read_rig(rig_path)
    labels = read_labels(labels_path)

    camera_ids = {cam.camera_id for cam in rig}
    for frame in raw.frames.values():
        if frame.camera_id not in camera_ids:
            raise ReferentialIntegrityError(
                f"frame {frame.frame_id} references unknown camera {frame.camera_id}")
        if frame.unit_id not in priors:
            raise ReferentialIntegrityError(
                f"frame {frame.frame_id} references unit {frame.unit_id} with no prior")
        for obs in frame.observations:
            if obs.semantic_label not in labels.names:
                obs.semantic_label = LabelTable.UNKNOWN

    graph = CorrespondenceGraph()
    for (fa, fb), m in sorted(raw.matches.items()):
        graph.add_pair(MatchPair(fa, fb, list(m.pairs)))
    return SceneInputs(graph, raw.frames, priors, rig, labels, raw)


# ---------------------------------------------------------------------------
# pair selection by prior frustum overlap
# ---------------------------------------------------------------------------

def _frame_poses_from_priors(
    frames: dict[int, Frame],
    priors: dict[int, tuple[float, Pose]],
    rig: list[RigCamera],
) -> dict[int, Pose]:
    by_cam = {cam.camera_id: cam for cam in rig}
    poses = {}
    for fid, frame in frames.items():
        _, unit_pose = priors[frame.unit_id]
        poses[fid] = camera_from_unit(unit_pose, by_cam[frame.camera_id].relative)
    return poses


def frustum_overlap_scores(
    frames: dict[int, Frame],
    frame_poses: dict[int, Pose],
    rig: list[RigCamera],
    config: PipelineConfig,
) -> dict[tuple[int, int], float]:
    """Symmetric overlap score for every unordered frame pair.

    A fixed grid of pixels per image is back-projected at a few depths inside
    the working band; the score of (a, b) is the mean over both directions of
    the fraction of samples landing inside the other frustum.
    """
    by_cam = {cam.camera_id: cam for cam in rig}
    fids = sorted(frames)
    n = len(fids)
    cols, rows = config.overlap_grid_cols, config.overlap_grid_rows
    depths = np.geomspace(config.overlap_near_m, config.overlap_far_m,
                          config.overlap_depth_samples)
    samples_per_frame = cols * rows * len(depths)

    # world-space sample points for every frame, (n, S, 3)
    world = np.empty((n, samples_per_frame, 3))
    Rs = np.empty((n, 3, 3))
    ts = np.empty((n, 3))
    Ks = []
    sizes = []
    for i, fid in enumerate(fids):
        frame = frames[fid]
        cam = by_cam[frame.camera_id]
        K = cam.intrinsics
        pose = frame_poses[fid]
        u = (np.arange(cols) + 0.5) / cols * frame.width
        v = (np.arange(rows) + 0.5) / rows * frame.height
        uu, vv = np.meshgrid(u, v, indexing="ij")
        xn = (uu.ravel() - K.cx) / K.fx
        yn = (vv.ravel() - K.cy) / K.fy
        dirs = np.column_stack([xn, yn, np.ones_like(xn)])  # camera frame
        pts = dirs[:, None, :] * depths[None, :, None]      # (grid, D, 3)
        world[i] = pose.to_world(pts.reshape(-1, 3))
        Rs[i] = pose.rotation
        ts[i] = pose.t
        Ks.append(K)
        sizes.append((frame.width, frame.height))

    scores: dict[tuple[int, int], float] = {}
    frac = np.zeros((n, n))
    all_world = world.reshape(-1, 3)
    near, far = config.overlap_near_m, config.overlap_far_m
    for j in range(n):
        K = Ks[j]
        w, h = sizes[j]
        xc = (all_world - ts[j]) @ Rs[j].T
        z = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * (xc[:, 0] / z) + K.cx
            v = K.fy * (xc[:, 1] / z) + K.cy
        inside = (z >= near) & (z <= far) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        frac[:, j] = inside.reshape(n, samples_per_frame).mean(axis=1)
    for i in range(n):
        for j in range(i + 1, n):
            scores[(fids[i], fids[j])] = 0.5 * (frac[i, j] + frac[j, i])
    return scores


def select_pairs(
    frames: dict[int, Frame],
    priors: dict[int, tuple[float, Pose]],
    rig: list[RigCamera],
    config: PipelineConfig,
) -> list[tuple[int, int]]:
    """Frame pairs whose prior frustum overlap meets the threshold.

    Pure function of the priors and configuration; excludes self pairs and
    returns canonically ordered (frame_a < frame_b) pairs sorted ascending.
    """
    missing = {f.unit_id for f in frames.values()} - set(priors)
    if missing:
        raise ReferentialIntegrityError(f"priors missing for units {sorted(missing)}")
    poses = _frame_poses_from_priors(frames, priors, rig)
    scores = frustum_overlap_scores(frames, poses, rig, config)
    return sorted(p for p, s in scores.items() if s >= config.overlap_threshold)


# ---------------------------------------------------------------------------
# semantic filtering and geometric verification
# ---------------------------------------------------------------------------

def filter_semantic(
    pair: MatchPair,
    frames: dict[int, Frame],
    labels: LabelTable,
    dynamic_classes: Iterable[str] = ("vehicle", "pedestrian", "rider"),
) -> MatchPair:
    """Drop cross-class matches and matches on dynamic object classes.

    Matches survive only when both endpoints carry the same semantic label
    and that label is not in the dynamic set.  Unlabelled observations count
    as the class "unknown".  Never adds matches; idempotent.
    """
    fa, fb = frames[pair.frame_a], frames[pair.frame_b]
    dynamic_ids = labels.dynamic_ids(dynamic_classes)
    kept = []
    for ia, ib in pair.matches:
        la = fa.observations[ia].semantic_label
        lb = fb.observations[ib].semantic_label
        if la != lb:
            continue
        if la in dynamic_ids:
            continue
        kept.append((ia, ib))
    return MatchPair(pair.frame_a, pair.frame_b, kept)


def normalized_coords(frame: Frame, K: CameraIntrinsics, indices) -> np.ndarray:
    """Observation pixels -> undistorted normalized camera coordinates."""
    px = np.array([frame.observations[i].pixel for i in indices], dtype=float)
    xd = (px[:, 0] - K.cx) / K.fx
    yd = (px[:, 1] - K.cy) / K.fy
    xn, yn = undistort_normalized(K, xd, yd)
    return np.column_stack([xn, yn])


def verify_pair(
    pair: MatchPair,
    frames: dict[int, Frame],
    K_a: CameraIntrinsics,
    K_b: CameraIntrinsics,
    config: PipelineConfig,
) -> MatchPair:
    """Geometric verification by essential-matrix RANSAC.

    Estimates an essential matrix over normalized coordinates with
    Sampson-distance inliers; the result is verified when the inlier count
    reaches ``verify_min_inliers``.  Pairs with fewer than 8 matches are
    returned unverified with reason "insufficient".
    """
    out = MatchPair(pair.frame_a, pair.frame_b, list(pair.matches))
    if len(pair.matches) < 8:
        out.verified = False
        out.inlier_mask = np.zeros(len(pair.matches), dtype=bool)
        out.reason = "insufficient"
        return out
    ia = [m[0] for m in pair.matches]
    ib = [m[1] for m in pair.matches]
    pa = normalized_coords(frames[pair.frame_a], K_a, ia)
    pb = normalized_coords(frames[pair.frame_b], K_b, ib)
    rng = np.random.default_rng(
        np.random.SeedSequence((config.derived_seed(pair.frame_a, pair.frame_b), 0x5E)))
    E, mask = essential_ransac(
        pa, pb,
        threshold=config.verify_sampson_threshold,
        rng=rng,
        max_iterations=config.verify_max_iterations,
        min_iterations=config.verify_min_iterations,
        confidence=config.verify_confidence,
    )
    out.inlier_mask = mask
    out.verified = E is not None and int(mask.sum()) >= config.verify_min_inliers
    if not out.verified:
        out.reason = "too_few_inliers"
    return out
