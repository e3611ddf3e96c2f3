"""Incremental multi-camera rig structure-from-motion.

The rigid camera set is the atomic unit throughout: registration fuses
per-frame PnP estimates into vehicle poses, bundle adjustment optimizes
vehicle poses plus per-camera relative poses instead of per-image poses,
and fragmented scenes aggregate through a single rigid transform per merge.
"""

from .aggregate import (
    AggregationResult,
    SceneBundle,
    aggregate_all,
    associate_scenes,
    coarse_assemble,
    init_transform,
    register_merge_unit,
    select_merge_scene,
    transform_ba,
)
from .ba import (
    BAProblem,
    RobustLoss,
    build_global_csba,
    build_local_csba,
    build_traditional_ba,
    choose_ba_scope,
    filter_after_ba,
)
from .config import PipelineConfig, load_config, save_config
from .errors import (
    AggregationFailure,
    DegenerateInputError,
    GenerationError,
    InitializationFailure,
    ParseError,
    ReconstructionFailure,
    ReferentialIntegrityError,
    RigSfMError,
)
from .evaluate import EvalReport, align_umeyama, evaluate
from .geometry import (
    CameraIntrinsics,
    Pose,
    RelativePose,
    SceneTransform,
    camera_from_unit,
    project,
    relative_of,
    rotation_geodesic,
)
from .ingest import (
    CorrespondenceGraph,
    MatchPair,
    SceneInputs,
    filter_semantic,
    load_inputs,
    select_pairs,
    verify_pair,
)
from .model import (
    Frame,
    Observation,
    Reconstruction,
    RigCamera,
    RigidUnit,
    ScenePoint,
)
from .pipeline import PipelineResult, reconstruct_project, reconstruct_scene
from .pnp import PnPResult, Rejection
from .register import (
    RegistrationCandidate,
    fuse_unit_rotation,
    fuse_unit_translation,
    initialize_model,
    next_best_unit,
    pnp_register,
    register_unit,
    select_initial_units,
)
from .solver import LMConfig, SolveReport, solve
from .synthetic import SynthConfig, SyntheticScene, generate_scene, generate_scene_set
from .triangulate import (
    PlaneModel,
    TriangulationObservation,
    filter_road_points,
    fit_plane_loransac,
    triangulate_track,
)

__version__ = "0.1.0"
