import numpy as np
import pytest

from rigsfm.config import PipelineConfig
from rigsfm.formats import LabelTable
from rigsfm.geometry import Pose, camera_from_unit, random_quat
from rigsfm.ingest import CorrespondenceGraph, MatchPair, SceneInputs
from rigsfm.model import (
    Frame,
    Observation,
    Reconstruction,
    RigCamera,
    RigidUnit,
    ScenePoint,
)
from rigsfm.synthetic import SynthConfig, SyntheticScene, generate_scene


def scene_to_inputs(scene: SyntheticScene) -> SceneInputs:
    """Wrap an in-memory synthetic scene as pipeline inputs.

    Frames and the rig are copied: the pipeline mutates them (registration
    flags, track links, refined calibration) and fixtures are shared.
    """
    graph = CorrespondenceGraph()
    for (fa, fb), m in sorted(scene.matches.items()):
        graph.add_pair(MatchPair(fa, fb, list(m)))
    frames = {
        fid: Frame(f.frame_id, f.camera_id, f.unit_id, f.width, f.height,
                   [Observation(o.pixel.copy(), o.semantic_label)
                    for o in f.observations])
        for fid, f in scene.frames.items()
    }
    rig = [RigCamera(c.camera_id, c.intrinsics, c.relative, c.width, c.height)
           for c in scene.rig_input]
    return SceneInputs(graph, frames, scene.priors, rig, scene.labels, None)


def truth_reconstruction(scene: SyntheticScene, rig=None) -> Reconstruction:
    """Reconstruction at generator truth (optionally with another rig)."""
    rig = rig if rig is not None else scene.rig_true
    recon = Reconstruction([
        RigCamera(c.camera_id, c.intrinsics, c.relative, c.width, c.height)
        for c in rig])
    for uid, (ts, pose) in scene.units_true.items():
        recon.add_unit(RigidUnit(uid, ts, pose, [], True))
    for fid in sorted(scene.frames):
        f = scene.frames[fid]
        recon.add_frame(Frame(
            f.frame_id, f.camera_id, f.unit_id, f.width, f.height,
            [Observation(o.pixel.copy(), o.semantic_label) for o in f.observations],
            registered=True))
    by_point: dict[int, list[tuple[int, int]]] = {}
    for (fid, oi), pi in scene.obs_point.items():
        by_point.setdefault(pi, []).append((fid, oi))
    for pi in sorted(by_point):
        track = sorted(by_point[pi])
        if len(track) >= 2:
            recon.add_point(ScenePoint(scene.points[pi].copy(),
                                       int(scene.point_labels[pi]), track, 0.0))
    return recon


def unit_pose_maps(scene: SyntheticScene, recon: Reconstruction):
    est = {u: recon.units[u].pose for u in recon.units
           if recon.units[u].registered and recon.units[u].pose is not None}
    ref = {u: scene.units_true[u][1] for u in est}
    return est, ref


def random_pose(rng) -> Pose:
    return Pose(random_quat(rng), rng.uniform(-10, 10, size=3))


SMALL_SCENE_CFG = SynthConfig(
    num_units=8, num_cameras=4, points_road=160, points_building=160,
    points_vegetation=80, points_vehicle=20, seed=101, heading_rate_deg=4.0)


@pytest.fixture(scope="session")
def small_scene() -> SyntheticScene:
    """Noise-free 4-camera, 8-unit scene shared across module tests."""
    return generate_scene(SMALL_SCENE_CFG)


@pytest.fixture(scope="session")
def small_result(small_scene):
    """Full pipeline result on the small noise-free scene."""
    from rigsfm.pipeline import reconstruct_scene

    inputs = scene_to_inputs(small_scene)
    result = reconstruct_scene(inputs, PipelineConfig(seed=0))
    return result, inputs


@pytest.fixture(scope="session")
def two_frame_fixture():
    """Two frames with labelled observations for semantic-filter tests.

    Labels: 0 road, 1 building, 3 vehicle (dynamic).
    """
    labels = LabelTable({0: "road", 1: "building", 2: "vegetation", 3: "vehicle"})
    fa = Frame(1, 0, 0, 640, 480)
    fb = Frame(2, 1, 0, 640, 480)
    rng = np.random.default_rng(3)
    for i in range(12):
        fa.observations.append(Observation(rng.uniform(10, 600, 2), [0, 0, 0, 0, 1, 1, 1, 1, 3, 3, 0, 1][i]))
        fb.observations.append(Observation(rng.uniform(10, 600, 2), [0, 0, 1, 1, 1, 1, 0, 0, 3, 3, 0, 1][i]))
    return {1: fa, 2: fb}, labels
