"""Synthetic ground-truth scenes for desk-scale validation.

Builds a vehicle rig on a ring, drives it along a gently curving road, and
surrounds it with semantically labelled world points (road points exactly on
a plane, buildings and vegetation off it, plus a dynamic class).  Emits both
the ground truth and the noisy ingest-format files, with sidecars labelling
every planted match outlier, road outlier, and occluded frame so tests can
check recovery rates against exact bookkeeping.  A fixed seed reproduces the
output byte for byte.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParseError
from .formats import (
    CorrespondenceData,
    LabelTable,
    RawMatches,
    write_anchor,
    write_correspondences,
    write_labels,
    write_priors,
    write_rig,
    write_trajectory,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    RelativePose,
    SceneTransform,
    camera_from_unit,
    matrix_to_quat,
    quat_from_rotvec,
)
from .model import Frame, Observation, RigCamera

__all__ = [
    "SynthConfig",
    "SyntheticScene",
    "generate_scene",
    "generate_scene_set",
    "write_scene",
    "write_cross_matches",
    "read_cross_matches",
    "load_synth_config",
    "save_synth_config",
    "SEMANTIC_CLASSES",
]

SEMANTIC_CLASSES = {0: "road", 1: "building", 2: "vegetation", 3: "vehicle"}


@dataclass
class SynthConfig:
    """Everything that shapes a synthetic scene, with deterministic seeding."""

    # rig
    num_cameras: int = 6
    ring_radius_m: float = 1.0
    camera_pitch_deg: float = 12.0
    image_width: int = 640
    image_height: int = 480
    focal_px: float = 420.0
    distortion_k1: float = 0.0
    distortion_k2: float = 0.0

    # trajectory; the heading wobble varies curvature so the path never
    # degenerates to a circular arc, and the pitch wobble models gentle
    # slope changes (pure-yaw trajectories leave vertical rig offsets
    # indistinguishable from vertical world shifts)
    num_units: int = 20
    unit_spacing_m: float = 1.5
    heading_rate_deg: float = 1.0
    heading_wobble_deg: float = 3.0
    pitch_wobble_deg: float = 1.5
    vehicle_height_m: float = 1.6
    timestamp_step_s: float = 0.1

    # world points
    points_road: int = 300
    points_building: int = 260
    points_vegetation: int = 140
    points_vehicle: int = 40
    road_half_width_m: float = 8.0
    building_offset_m: float = 10.0
    building_height_m: float = 7.0
    road_slope: float = 0.0

    # noise and corruption
    pixel_noise_px: float = 0.0
    match_outlier_fraction: float = 0.0
    road_outlier_fraction: float = 0.0
    road_outlier_offset_m: float = 0.9
    prior_rotation_noise_deg: float = 0.0
    prior_translation_noise_m: float = 0.0
    calib_rotation_error_deg: float = 0.0
    calib_translation_error_m: float = 0.0
    gnss_noise_m: float = 0.0
    occluded_camera: int = -1
    occluded_unit_fraction: float = 0.0

    # visibility and match emission
    depth_min_m: float = 2.0
    depth_max_m: float = 60.0
    pair_min_shared: int = 12
    pair_max_distance_m: float = 25.0

    seed: int = 0
    scene_id: int = 0


@dataclass
class SyntheticScene:
    """Ground truth plus the noisy inputs derived from it, in one frame."""

    config: SynthConfig
    labels: LabelTable
    rig_true: list[RigCamera]
    rig_input: list[RigCamera]
    units_true: dict[int, tuple[float, Pose]]
    priors: dict[int, tuple[float, Pose]]
    points: np.ndarray
    point_labels: np.ndarray
    frames: dict[int, Frame]
    obs_point: dict[tuple[int, int], int]
    matches: dict[tuple[int, int], list[tuple[int, int]]]
    outlier_matches: set[tuple[int, int, int]]
    road_outlier_points: set[int]
    occluded_frames: set[int]
    anchor_true: SceneTransform
    anchor_input: SceneTransform
    scene_id: int = 0

    @property
    def trajectory_length_m(self) -> float:
        ts = sorted(self.units_true)
        origins = np.stack([self.units_true[u][1].t for u in ts])
        return float(np.sum(np.linalg.norm(np.diff(origins, axis=0), axis=1)))

    def correspondence_data(self) -> CorrespondenceData:
        data = CorrespondenceData()
        data.frames = self.frames
        for key, pairs in sorted(self.matches.items()):
            data.matches[key] = RawMatches(key[0], key[1], list(pairs))
        return data

    def point_of_scene_point(self, track: list[tuple[int, int]]):
        """Generator point index behind a reconstructed track, or None."""
        votes = {self.obs_point.get((fid, oi)) for fid, oi in track}
        votes.discard(None)
        return votes.pop() if len(votes) == 1 else None


def _rng(config: SynthConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((config.seed, config.scene_id, tag)))


def build_rig(config: SynthConfig) -> list[RigCamera]:
    """True rig: cameras on a ring, looking outward with a downward pitch."""
    K = CameraIntrinsics(config.focal_px, config.focal_px,
                         config.image_width / 2.0, config.image_height / 2.0,
                         config.distortion_k1, config.distortion_k2)
    rig = []
    pitch = math.radians(config.camera_pitch_deg)
    for c in range(config.num_cameras):
        yaw = 2.0 * math.pi * c / config.num_cameras
        forward = np.array([math.cos(yaw) * math.cos(pitch),
                            math.sin(yaw) * math.cos(pitch),
                            -math.sin(pitch)])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(forward, right)
        R_vc = np.stack([right, down, forward])  # vehicle -> camera coords
        pos = np.array([config.ring_radius_m * math.cos(yaw),
                        config.ring_radius_m * math.sin(yaw), 0.0])
        rig.append(RigCamera(c, K, RelativePose(matrix_to_quat(R_vc), pos),
                             config.image_width, config.image_height))
    return rig


def _path_states(config: SynthConfig, count: int) -> list[tuple[np.ndarray, float]]:
    """(position, heading) of every path sample from the shared global road."""
    def increment(idx: int) -> float:
        return math.radians(config.heading_rate_deg
                            + config.heading_wobble_deg * math.sin(0.9 * idx))

    states = []
    heading = 0.0
    pos = np.zeros(3)
    for idx in range(count):
        states.append((pos.copy(), heading))
        pos = pos + config.unit_spacing_m * np.array(
            [math.cos(heading), math.sin(heading), 0.0])
        heading += increment(idx)
    return states


def _unit_pose(config: SynthConfig, pos: np.ndarray, yaw: float, wobble_idx: int) -> Pose:
    Rz = np.array([[math.cos(yaw), math.sin(yaw), 0.0],
                   [-math.sin(yaw), math.cos(yaw), 0.0],
                   [0.0, 0.0, 1.0]])
    theta = math.radians(config.pitch_wobble_deg) * math.sin(0.5 * wobble_idx)
    Rp = np.array([[math.cos(theta), 0.0, -math.sin(theta)],
                   [0.0, 1.0, 0.0],
                   [math.sin(theta), 0.0, math.cos(theta)]])
    origin = pos + np.array([0.0, 0.0, config.vehicle_height_m
                             + config.road_slope * pos[0]])
    return Pose(matrix_to_quat(Rp @ Rz), origin)


def build_trajectory(config: SynthConfig, start_index: int = 0,
                     reverse: bool = False) -> dict[int, tuple[float, Pose]]:
    """Unit poses along a gently curving path; ids offset by scene.

    With ``reverse`` the segment is driven in the opposite direction (a
    return pass over the same road), which is how fragmented captures
    revisit a place in practice.
    """
    states = _path_states(config, start_index + config.num_units)
    segment = states[start_index:start_index + config.num_units]
    if reverse:
        segment = [(pos, yaw + math.pi) for pos, yaw in reversed(segment)]
    units = {}
    for j, (pos, yaw) in enumerate(segment):
        uid = config.scene_id * 100000 + j
        ts = config.timestamp_step_s * j + 1000.0 * config.scene_id
        units[uid] = (ts, _unit_pose(config, pos, yaw, start_index + j))
    return units


def _build_points(config: SynthConfig, units: dict[int, tuple[float, Pose]]):
    rng = _rng(config, 1)
    uids = sorted(units)
    origins = np.stack([units[u][1].t for u in uids])
    headings = np.stack([units[u][1].rotation[0] for u in uids])  # forward row

    def along_path(n, lateral_lo, lateral_hi, z_lo, z_hi, both_sides=True):
        anchor = rng.integers(0, len(uids), size=n)
        longi = rng.uniform(-4.0, 4.0 + config.unit_spacing_m, size=n)
        lateral = rng.uniform(lateral_lo, lateral_hi, size=n)
        if both_sides:
            lateral *= rng.choice([-1.0, 1.0], size=n)
        z = rng.uniform(z_lo, z_hi, size=n)
        fwd = headings[anchor]
        left = np.stack([-fwd[:, 1], fwd[:, 0], np.zeros(n)], axis=1)
        base = origins[anchor]
        pts = base + longi[:, None] * fwd + lateral[:, None] * left
        pts[:, 2] = z
        return pts

    road = along_path(config.points_road, 0.5, config.road_half_width_m, 0.0, 0.0)
    road[:, 2] = config.road_slope * road[:, 0]
    building = along_path(config.points_building, config.building_offset_m,
                          config.building_offset_m + 4.0, 0.5, config.building_height_m)
    veget = along_path(config.points_vegetation, 3.0, 12.0, 1.0, 6.0)
    vehicle = along_path(config.points_vehicle, 1.0, 4.0, 0.3, 1.8)

    points = np.concatenate([road, building, veget, vehicle])
    labels = np.concatenate([
        np.zeros(len(road), dtype=int),
        np.ones(len(building), dtype=int),
        np.full(len(veget), 2, dtype=int),
        np.full(len(vehicle), 3, dtype=int),
    ])

    road_outliers: set[int] = set()
    if config.road_outlier_fraction > 0:
        rng_out = _rng(config, 2)
        n_out = int(round(config.road_outlier_fraction * len(road)))
        chosen = rng_out.choice(len(road), size=n_out, replace=False)
        signs = rng_out.choice([-1.0, 1.0], size=n_out)
        extra = rng_out.uniform(0.0, 0.5, size=n_out)
        points[chosen, 2] += signs * (config.road_outlier_offset_m + extra)
        road_outliers = {int(i) for i in chosen}
    return points, labels, road_outliers


def _perturbed_pose(pose: Pose, rot_deg: float, trans_m: float,
                    rng: np.random.Generator) -> Pose:
    """Perturb by an exact rotation magnitude about a random axis and an
    exact translation magnitude in a random direction."""
    from .geometry import quat_multiply

    q, t = pose.q, pose.t
    if rot_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        q = quat_multiply(quat_from_rotvec(axis * math.radians(rot_deg)), pose.q)
    if trans_m > 0:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        t = t + trans_m * direction
    return Pose(q, t)


def _generate_from_world(config: SynthConfig,
                         units: dict[int, tuple[float, Pose]],
                         points: np.ndarray, labels: np.ndarray,
                         road_outliers: set[int]) -> SyntheticScene:
    rig_true = build_rig(config)
    k = config.num_cameras
    uids = sorted(units)

    # occlusions
    occluded_units: set[int] = set()
    if config.occluded_camera >= 0 and config.occluded_unit_fraction > 0:
        rng_occ = _rng(config, 3)
        n_occ = int(round(config.occluded_unit_fraction * len(uids)))
        occluded_units = {uids[i] for i in
                          rng_occ.choice(len(uids), size=n_occ, replace=False)}

    # observations
    rng_px = _rng(config, 4)
    frames: dict[int, Frame] = {}
    obs_point: dict[tuple[int, int], int] = {}
    visible: dict[int, np.ndarray] = {}
    obs_index: dict[int, dict[int, int]] = {}
    centers: dict[int, np.ndarray] = {}
    occluded_frames: set[int] = set()
    any_obs = False
    for ui, uid in enumerate(uids):
        _, upose = units[uid]
        for cam in rig_true:
            fid = uid * 100 + cam.camera_id
            frame = Frame(fid, cam.camera_id, uid,
                          config.image_width, config.image_height)
            frames[fid] = frame
            pose = camera_from_unit(upose, cam.relative)
            centers[fid] = pose.t
            if uid in occluded_units and cam.camera_id == config.occluded_camera:
                occluded_frames.add(fid)
                visible[fid] = np.zeros(0, dtype=int)
                obs_index[fid] = {}
                continue
            from .geometry import project_points
            uv, z = project_points(cam.intrinsics, pose, points)
            ok = ((z >= config.depth_min_m) & (z <= config.depth_max_m)
                  & (uv[:, 0] >= 0) & (uv[:, 0] < config.image_width)
                  & (uv[:, 1] >= 0) & (uv[:, 1] < config.image_height))
            idx = np.nonzero(ok)[0]
            noisy = uv[idx]
            if config.pixel_noise_px > 0:
                noisy = noisy + rng_px.normal(0.0, config.pixel_noise_px,
                                              size=noisy.shape)
                keep = ((noisy[:, 0] >= 0) & (noisy[:, 0] < config.image_width)
                        & (noisy[:, 1] >= 0) & (noisy[:, 1] < config.image_height))
                idx, noisy = idx[keep], noisy[keep]
            index_map: dict[int, int] = {}
            for n, (pi, px) in enumerate(zip(idx, noisy)):
                frame.observations.append(Observation(px, int(labels[pi])))
                obs_point[(fid, n)] = int(pi)
                index_map[int(pi)] = n
                any_obs = True
            visible[fid] = idx
            obs_index[fid] = index_map
    if not any_obs:
        raise GenerationError("no world point is visible from any camera")

    # matches: pairs sharing enough points, within the distance cap
    rng_match = _rng(config, 5)
    matches: dict[tuple[int, int], list[tuple[int, int]]] = {}
    outlier_matches: set[tuple[int, int, int]] = set()
    fids = sorted(frames)
    vis_sets = {fid: set(visible[fid].tolist()) for fid in fids}
    for i, fa in enumerate(fids):
        for fb in fids[i + 1:]:
            if np.linalg.norm(centers[fa] - centers[fb]) > config.pair_max_distance_m:
                continue
            shared = sorted(vis_sets[fa] & vis_sets[fb])
            if len(shared) < config.pair_min_shared:
                continue
            pair_matches = [(obs_index[fa][p], obs_index[fb][p]) for p in shared]
            if config.match_outlier_fraction > 0:
                nb = len(frames[fb].observations)
                flips = rng_match.random(len(pair_matches)) < config.match_outlier_fraction
                for mi in np.nonzero(flips)[0]:
                    ia, ib = pair_matches[mi]
                    wrong = int(rng_match.integers(0, nb))
                    if nb > 1:
                        while wrong == ib:
                            wrong = int(rng_match.integers(0, nb))
                    pair_matches[mi] = (ia, wrong)
                    outlier_matches.add((fa, fb, int(mi)))
            # rewiring can collide with an existing entry; drop duplicates
            seen = set()
            deduped = []
            for mi, m in enumerate(pair_matches):
                if m in seen:
                    outlier_matches.discard((fa, fb, mi))
                    continue
                seen.add(m)
                deduped.append(m)
            if len(deduped) != len(pair_matches):
                remap = {}
                cursor = 0
                for mi, m in enumerate(pair_matches):
                    if m in remap:
                        continue
                    remap[m] = cursor
                    cursor += 1
                outlier_matches = {
                    (a, b, remap[pair_matches[c]]) if (a, b) == (fa, fb) else (a, b, c)
                    for a, b, c in outlier_matches
                    if (a, b) != (fa, fb) or pair_matches[c] in remap}
                pair_matches = deduped
            matches[(fa, fb)] = pair_matches

    # priors and input calibration
    rng_prior = _rng(config, 6)
    priors = {}
    for uid in uids:
        ts, pose = units[uid]
        priors[uid] = (ts, _perturbed_pose(pose, config.prior_rotation_noise_deg,
                                           config.prior_translation_noise_m,
                                           rng_prior))
    # calibration perturbations are zero-mean across the rig: a common
    # component is a change of the vehicle-frame convention, not a
    # calibration error, and no estimator could recover it
    rng_calib = _rng(config, 7)
    k_cams = len(rig_true)
    rot_vecs = rng_calib.normal(size=(k_cams, 3))
    tr_vecs = rng_calib.normal(size=(k_cams, 3))
    if k_cams > 1:
        rot_vecs -= rot_vecs.mean(axis=0)
        tr_vecs -= tr_vecs.mean(axis=0)
    rot_norm = np.linalg.norm(rot_vecs, axis=1).mean()
    tr_norm = np.linalg.norm(tr_vecs, axis=1).mean()
    rot_vecs *= (math.radians(config.calib_rotation_error_deg) / max(rot_norm, 1e-12))
    tr_vecs *= (config.calib_translation_error_m / max(tr_norm, 1e-12))
    rig_input = []
    for i, cam in enumerate(rig_true):
        rel = cam.relative
        q = rel.q
        t = rel.t
        if config.calib_rotation_error_deg > 0:
            from .geometry import quat_multiply
            q = quat_multiply(quat_from_rotvec(rot_vecs[i]), rel.q)
        if config.calib_translation_error_m > 0:
            t = rel.t + tr_vecs[i]
        rig_input.append(RigCamera(cam.camera_id, cam.intrinsics,
                                   RelativePose(q, t), cam.width, cam.height))

    rng_gnss = _rng(config, 8)
    anchor_true = SceneTransform.identity()
    anchor_input = anchor_true
    if config.gnss_noise_m > 0:
        anchor_input = SceneTransform(
            anchor_true.q,
            anchor_true.t + rng_gnss.normal(0.0, config.gnss_noise_m, size=3))

    return SyntheticScene(
        config=config,
        labels=LabelTable(dict(SEMANTIC_CLASSES)),
        rig_true=rig_true,
        rig_input=rig_input,
        units_true=dict(units),
        priors=priors,
        points=points,
        point_labels=labels,
        frames=frames,
        obs_point=obs_point,
        matches=matches,
        outlier_matches=outlier_matches,
        road_outlier_points=road_outliers,
        occluded_frames=occluded_frames,
        anchor_true=anchor_true,
        anchor_input=anchor_input,
        scene_id=config.scene_id,
    )


def generate_scene(config: SynthConfig) -> SyntheticScene:
    """One synthetic scene in its own (= world) frame."""
    units = build_trajectory(config)
    points, labels, road_outliers = _build_points(config, units)
    return _generate_from_world(config, units, points, labels, road_outliers)


def generate_scene_set(
    config: SynthConfig,
    num_scenes: int,
    overlap_units: int = 6,
    plant_rotation_deg: float = 2.0,
    plant_translation_m: float = 3.0,
    alternate_directions: bool = True,
) -> tuple[list[SyntheticScene], dict[tuple[int, int], dict[tuple[int, int], list[tuple[int, int]]]]]:
    """Fragmented passes over one shared world, for aggregation tests.

    Scene s covers units [s*(n - overlap), ...); every non-first scene's GNSS
    anchor is corrupted by a planted rigid offset (plus the configured GNSS
    noise), which is exactly what aggregation must recover.  By default odd
    scenes drive their segment in the opposite direction (a return pass), so
    overlapping regions are seen from two distinct sides.  Scenes are
    expressed in local frames (anchored at their first unit origin); cross
    returns the inter-scene matches keyed by scene pair.
    """
    if num_scenes < 1:
        raise GenerationError("need at least one scene")
    step = config.num_units - overlap_units
    if step <= 0:
        raise GenerationError("overlap_units must be smaller than num_units")

    # one shared world: trajectory over the full extent and one point set
    total_units = step * (num_scenes - 1) + config.num_units
    world_cfg = dataclasses.replace(config, num_units=total_units, scene_id=0)
    world_units = build_trajectory(world_cfg)
    states = _path_states(world_cfg, total_units)
    points, labels, road_outliers = _build_points(world_cfg, world_units)

    scenes: list[SyntheticScene] = []
    for s in range(num_scenes):
        seg = list(enumerate(states))[s * step: s * step + config.num_units]
        reverse = alternate_directions and (s % 2 == 1)
        if reverse:
            seg = [(idx, (pos, yaw + math.pi)) for idx, (pos, yaw) in reversed(seg)]
        global_poses = [(idx, _unit_pose(config, pos, yaw, idx))
                        for idx, (pos, yaw) in seg]
        origin = global_poses[0][1].t.copy()
        origin_map = SceneTransform(np.array([1.0, 0, 0, 0]), -origin)  # global -> local
        local_units = {}
        for local_j, (idx, pose) in enumerate(global_poses):
            uid = s * 100000 + local_j
            ts = config.timestamp_step_s * local_j + 1000.0 * s
            local_units[uid] = (ts, origin_map.apply_pose(pose))
        scene_cfg = dataclasses.replace(config, scene_id=s)
        local_points = points - origin
        scene = _generate_from_world(scene_cfg, local_units, local_points,
                                     labels, road_outliers)
        anchor_true = SceneTransform(np.array([1.0, 0, 0, 0]), origin)
        rng_a = _rng(scene_cfg, 9)
        anchor_used = anchor_true
        if s > 0 and (plant_rotation_deg > 0 or plant_translation_m > 0):
            axis = rng_a.normal(size=3)
            axis /= np.linalg.norm(axis)
            direction = rng_a.normal(size=3)
            direction /= np.linalg.norm(direction)
            plant = SceneTransform(
                quat_from_rotvec(axis * math.radians(plant_rotation_deg)),
                direction * plant_translation_m)
            anchor_used = plant.compose(anchor_true)
        if config.gnss_noise_m > 0:
            anchor_used = SceneTransform(
                anchor_used.q,
                anchor_used.t + rng_a.normal(0.0, config.gnss_noise_m, size=3))
        scene.anchor_true = anchor_true
        scene.anchor_input = anchor_used
        scenes.append(scene)

    # cross-scene matches through the shared world points
    cross: dict[tuple[int, int], dict[tuple[int, int], list[tuple[int, int]]]] = {}
    for sa in range(num_scenes):
        for sb in range(sa + 1, num_scenes):
            pair_map: dict[tuple[int, int], list[tuple[int, int]]] = {}
            A, B = scenes[sa], scenes[sb]
            vis_a = {fid: {A.obs_point[(fid, n)]: n
                           for n in range(len(A.frames[fid].observations))}
                     for fid in sorted(A.frames)}
            vis_b = {fid: {B.obs_point[(fid, n)]: n
                           for n in range(len(B.frames[fid].observations))}
                     for fid in sorted(B.frames)}
            for fa, map_a in vis_a.items():
                ca = A.frames[fa]
                pose_a_t = A.anchor_true.apply_points(camera_from_unit(
                    A.units_true[ca.unit_id][1], A.rig_true[ca.camera_id].relative).t)
                for fb, map_b in vis_b.items():
                    cb = B.frames[fb]
                    pose_b_t = B.anchor_true.apply_points(camera_from_unit(
                        B.units_true[cb.unit_id][1], B.rig_true[cb.camera_id].relative).t)
                    if np.linalg.norm(pose_a_t - pose_b_t) > config.pair_max_distance_m:
                        continue
                    shared = sorted(set(map_a) & set(map_b))
                    if len(shared) < config.pair_min_shared:
                        continue
                    pair_map[(fa, fb)] = [(map_a[p], map_b[p]) for p in shared]
            cross[(sa, sb)] = pair_map
    return scenes, cross


# ---------------------------------------------------------------------------
# file emission
# ---------------------------------------------------------------------------

def write_scene(scene: SyntheticScene, out_dir: str | Path) -> Path:
    """Write one scene directory: ingest inputs plus a ground_truth/ subdir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_correspondences(scene.correspondence_data(), out / "correspondences.txt")
    write_priors(scene.priors, out / "priors.txt")
    write_rig(scene.rig_input, out / "rig.txt")
    write_labels(scene.labels, out / "labels.txt")
    write_anchor(scene.anchor_input, out / "anchor.txt")

    gt = out / "ground_truth"
    gt.mkdir(exist_ok=True)
    write_trajectory([(ts, pose) for ts, pose in scene.units_true.values()],
                     gt / "trajectory.txt")
    write_rig(scene.rig_true, gt / "rig.txt")
    write_anchor(scene.anchor_true, gt / "anchor.txt")
    lines = ["rigsfm-sidecar 1"]
    for fa, fb, mi in sorted(scene.outlier_matches):
        lines.append(f"outlier {fa} {fb} {mi}")
    for pid in sorted(scene.road_outlier_points):
        lines.append(f"road_outlier {pid}")
    for fid in sorted(scene.occluded_frames):
        lines.append(f"occluded {fid}")
    for (fid, oi), pid in sorted(scene.obs_point.items()):
        lines.append(f"obsmap {fid} {oi} {pid}")
    (gt / "sidecar.txt").write_text("\n".join(lines) + "\n")
    return out


def write_cross_matches(pair_map: dict[tuple[int, int], list[tuple[int, int]]],
                        path: str | Path) -> None:
    lines = ["rigsfm-crossmatches 1"]
    for (fa, fb) in sorted(pair_map):
        lines.append(f"pair {fa} {fb}")
        for ia, ib in pair_map[(fa, fb)]:
            lines.append(f"m {ia} {ib}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cross_matches(path: str | Path) -> dict[tuple[int, int], list[tuple[int, int]]]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("rigsfm-crossmatches"):
        raise ParseError(path, 1, "expected 'rigsfm-crossmatches <version>' header")
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}
    current = None
    for line_no, raw in enumerate(lines[1:], start=2):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        if toks[0] == "pair" and len(toks) == 3:
            current = (int(toks[1]), int(toks[2]))
            out[current] = []
        elif toks[0] == "m" and len(toks) == 3 and current is not None:
            out[current].append((int(toks[1]), int(toks[2])))
        else:
            raise ParseError(path, line_no, f"malformed record {raw!r}")
    return out


# ---------------------------------------------------------------------------
# synth config file
# ---------------------------------------------------------------------------

def save_synth_config(config: SynthConfig, path: str | Path) -> None:
    lines = ["rigsfm-synth 1"]
    for f in dataclasses.fields(config):
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_synth_config(path: str | Path) -> SynthConfig:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("rigsfm-synth"):
        raise ParseError(path, 1, "expected 'rigsfm-synth <version>' header")
    fields_by_name = {f.name: f for f in dataclasses.fields(SynthConfig)}
    config = SynthConfig()
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, line_no, "expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields_by_name:
            raise ParseError(path, line_no, f"unknown synth key {key!r}")
        ftype = fields_by_name[key].type
        try:
            if ftype in ("int", int):
                setattr(config, key, int(value))
            else:
                setattr(config, key, float(value))
        except ValueError:
            raise ParseError(path, line_no, f"bad value {value!r}") from None
    return config
