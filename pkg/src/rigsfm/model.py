"""Scene data model: frames, rigid units, scene points, reconstructions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Pose, RelativePose, camera_from_unit

__all__ = [
    "Observation",
    "Frame",
    "RigidUnit",
    "ScenePoint",
    "RigCamera",
    "Reconstruction",
]


@dataclass
class Observation:
    """A 2D feature observation in one frame."""

    pixel: np.ndarray
    semantic_label: int
    track_id: Optional[int] = None

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class Frame:
    """One image: a single rig camera at a single rigid-unit timestamp."""

    frame_id: int
    camera_id: int
    unit_id: int
    width: int
    height: int
    observations: list[Observation] = field(default_factory=list)
    registered: bool = False
    # Set only by the per-image baseline and ablation paths; the rigid
    # pipeline always derives frame poses from the unit pose.
    pose_override: Optional[Pose] = None


@dataclass
class RigidUnit:
    """All images captured by the rig at one vehicle timestamp."""

    unit_id: int
    timestamp: float
    pose: Optional[Pose] = None
    frame_ids: list[int] = field(default_factory=list)
    registered: bool = False


@dataclass
class ScenePoint:
    """A triangulated 3D point with its observation track."""

    position: np.ndarray
    semantic_label: int
    track: list[tuple[int, int]] = field(default_factory=list)  # (frame_id, obs index)
    error: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class RigCamera:
    """One physical rig camera: shared intrinsics and internal relative pose."""

    camera_id: int
    intrinsics: CameraIntrinsics
    relative: RelativePose
    width: int = 0
    height: int = 0


class Reconstruction:
    """Registered units and frames, the rig, and the triangulated points.

    Frame poses are not stored: a registered frame's pose is derived from its
    unit pose and its camera's relative pose, which keeps the rig exactly
    rigid by construction.  ``pose_override`` on a frame bypasses the
    derivation for the per-image baseline.
    """

    def __init__(self, rig: list[RigCamera]):
        self.rig: list[RigCamera] = sorted(rig, key=lambda c: c.camera_id)
        self.units: dict[int, RigidUnit] = {}
        self.frames: dict[int, Frame] = {}
        self.points: dict[int, ScenePoint] = {}
        self._next_point_id = 0

    # -- rig access ---------------------------------------------------------

    def camera(self, camera_id: int) -> RigCamera:
        for cam in self.rig:
            if cam.camera_id == camera_id:
                return cam
        raise KeyError(f"no rig camera with id {camera_id}")

    @property
    def num_cameras(self) -> int:
        return len(self.rig)

    # -- structure ----------------------------------------------------------

    def add_unit(self, unit: RigidUnit) -> None:
        if unit.unit_id in self.units:
            raise ValueError(f"duplicate unit id {unit.unit_id}")
        self.units[unit.unit_id] = unit

    def add_frame(self, frame: Frame) -> None:
        if frame.frame_id in self.frames:
            raise ValueError(f"duplicate frame id {frame.frame_id}")
        if frame.unit_id not in self.units:
            raise ValueError(f"frame {frame.frame_id} references unknown unit {frame.unit_id}")
        unit = self.units[frame.unit_id]
        for fid in unit.frame_ids:
            if self.frames[fid].camera_id == frame.camera_id:
                raise ValueError(
                    f"unit {unit.unit_id} already holds a frame for camera {frame.camera_id}"
                )
        self.frames[frame.frame_id] = frame
        unit.frame_ids.append(frame.frame_id)

    def new_point_id(self) -> int:
        pid = self._next_point_id
        self._next_point_id += 1
        return pid

    def add_point(self, point: ScenePoint) -> int:
        pid = self.new_point_id()
        self.points[pid] = point
        for frame_id, obs_idx in point.track:
            self.frames[frame_id].observations[obs_idx].track_id = pid
        return pid

    def remove_point(self, point_id: int) -> None:
        point = self.points.pop(point_id)
        for frame_id, obs_idx in point.track:
            obs = self.frames[frame_id].observations[obs_idx]
            if obs.track_id == point_id:
                obs.track_id = None

    # -- poses ---------------------------------------------------------------

    def frame_pose(self, frame_id: int) -> Optional[Pose]:
        frame = self.frames[frame_id]
        if frame.pose_override is not None:
            return frame.pose_override
        unit = self.units[frame.unit_id]
        if unit.pose is None:
            return None
        return camera_from_unit(unit.pose, self.camera(frame.camera_id).relative)

    def registered_units(self) -> list[RigidUnit]:
        return [u for u in self.units.values() if u.registered]

    def registered_frame_ids(self) -> list[int]:
        return [fid for fid, f in self.frames.items() if f.registered]

    # -- diagnostics ---------------------------------------------------------

    def mean_reprojection_error(self) -> float:
        """Mean per-observation reprojection error over all tracks, pixels."""
        from .geometry import project

        errs = []
        for point in self.points.values():
            for frame_id, obs_idx in point.track:
                frame = self.frames[frame_id]
                pose = self.frame_pose(frame_id)
                if pose is None:
                    continue
                uv = project(self.camera(frame.camera_id).intrinsics, pose, point.position)
                if uv is None:
                    continue
                errs.append(float(np.linalg.norm(uv - frame.observations[obs_idx].pixel)))
        return float(np.mean(errs)) if errs else 0.0
